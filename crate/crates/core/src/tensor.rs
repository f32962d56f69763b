//! Minimal dense kernels: CHW tensors, im2col convolution and max pooling.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub};

/// Floating-point element type of the network (`f32` for speed, `f64` for
/// gradient checking).
pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, c: usize, rs: isize, cs: isize| {
                    if r == 0 || c == 0 {
                        0
                    } else {
                        ((r - 1) as isize * rs + (c - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                // SAFETY: the extents of all three operands were checked above and
                // the output slice is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Which operand is transposed in [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

/// Row-major `c (m x n) = op(a) * op(b) + beta * c`, where `op(a)` is `m x k`.
pub fn gemm<R: Real>(ta: Trans, tb: Trans, m: usize, k: usize, n: usize, a: &[R], b: &[R], beta: R, c: &mut [R]) {
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    R::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![R::ZERO; c * h * w] }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> R {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Geometry of a square-kernel convolution with "same"-style padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_dim(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.pad() - span) / self.stride + 1
    }
}

/// Unfolds `x` into a `(c * k * k) x (ho * wo)` matrix.
pub fn im2col<R: Real>(x: &Tensor<R>, g: ConvGeom, cols: &mut Vec<R>) -> (usize, usize) {
    let (ho, wo) = (g.out_dim(x.h), g.out_dim(x.w));
    let p = ho * wo;
    let kk = g.kernel * g.kernel;
    cols.clear();
    cols.resize(x.c * kk * p, R::ZERO);
    let pad = g.pad() as isize;
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * kk + ky * g.kernel + kx) * p;
                let dst = &mut cols[row..row + p];
                let oy_off = (ky * g.dilation) as isize - pad;
                let ox_off = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + oy_off;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // contiguous valid range of ox
                        let lo = (-ox_off).max(0) as usize;
                        let hi = ((x.w as isize - ox_off).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + ox_off) as usize;
                            drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + ox_off;
                            if ix >= 0 && ix < x.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (ho, wo)
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im<R: Real>(cols: &[R], g: ConvGeom, ho: usize, wo: usize, dx: &mut Tensor<R>) {
    let p = ho * wo;
    let kk = g.kernel * g.kernel;
    let pad = g.pad() as isize;
    let plane = dx.plane();
    let (h, w) = (dx.h, dx.w);
    for c in 0..dx.c {
        let dst = &mut dx.data[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * kk + ky * g.kernel + kx) * p;
                let src = &cols[row..row + p];
                let oy_off = (ky * g.dilation) as isize - pad;
                let ox_off = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + ox_off;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 stride-1 max pooling over windows clipped to the map; returns the
/// pooled map and, per output element, the flat index of the selected input.
pub fn max_pool3<R: Real>(x: &Tensor<R>) -> (Tensor<R>, Vec<u32>) {
    let mut out = Tensor::zeros(x.c, x.h, x.w);
    let mut arg = vec![0u32; x.data.len()];
    let plane = x.plane();
    for c in 0..x.c {
        let base = c * plane;
        for y in 0..x.h {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(x.h - 1);
            for xx in 0..x.w {
                let x0 = xx.saturating_sub(1);
                let x1 = (xx + 1).min(x.w - 1);
                let mut best = base + y0 * x.w + x0;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        let i = base + yy * x.w + xi;
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                }
                let o = base + y * x.w + xx;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(Trans::N, Trans::N, m, k, n, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
        // transposed lhs: a stored as k x m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(Trans::T, Trans::N, m, k, n, &at, &b, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn conv_output_dims() {
        let g = ConvGeom { kernel: 3, stride: 2, dilation: 1 };
        assert_eq!(g.out_dim(64), 32);
        assert_eq!(g.out_dim(7), 4);
        let g = ConvGeom { kernel: 3, stride: 1, dilation: 4 };
        assert_eq!(g.out_dim(5), 5);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { kernel: 3, stride: 2, dilation: 2 };
        let mut x = Tensor::<f64>::zeros(2, 7, 6);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64) - 5.0;
        }
        let mut cols = Vec::new();
        let (ho, wo) = im2col(&x, g, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = Tensor::zeros(2, 7, 6);
        col2im(&y, g, ho, wo, &mut dx);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn max_pool_clips_at_borders() {
        let x = Tensor { c: 1, h: 2, w: 3, data: vec![1.0f64, 5.0, 2.0, 4.0, 0.0, 3.0] };
        let (p, arg) = max_pool3(&x);
        assert_eq!(p.data, vec![5.0, 5.0, 5.0, 5.0, 5.0, 5.0]);
        assert!(arg.iter().all(|&a| a == 1));
    }
}
