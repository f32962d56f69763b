//! RGB rasters, interpolation/decimation and the coarse image pyramid.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CHANNELS: usize = 3;

/// Row-major interleaved RGB image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("raster dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::Data(format!(
                "raster data length {} does not match {width}x{height}x{CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("raster contains non-finite samples".into()));
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Raster { width: width.max(1), height: height.max(1), data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    /// Sub-image `[x, x+w) x [y, y+h)`, which must lie inside the raster.
    pub fn window(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Data("window outside raster".into()));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(Raster { width: w, height: h, data })
    }
}

/// `round(n * scale)` with halves rounded up, never below one.
pub fn scaled_dim(n: usize, scale: f64) -> usize {
    ((n as f64 * scale + 0.5).floor() as usize).max(1)
}

/// Resamples by `scale`: bilinear when enlarging, area-weighted box filter when
/// shrinking, exact copy at 1.
pub fn resample(img: &Raster, scale: f64) -> Result<Raster> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("resample scale must be positive, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let ow = scaled_dim(img.width, scale);
    let oh = scaled_dim(img.height, scale);
    resize(img, ow, oh)
}

/// Resizes to exact dimensions, choosing the kernel per axis.
pub fn resize(img: &Raster, ow: usize, oh: usize) -> Result<Raster> {
    let (ow, oh) = (ow.max(1), oh.max(1));
    let wx = axis_weights(img.width, ow);
    let wy = axis_weights(img.height, oh);

    // horizontal pass: height x ow
    let mut tmp = vec![0.0f64; img.height * ow * CHANNELS];
    for y in 0..img.height {
        for (ox, taps) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(sx, w) in taps {
                let base = (y * img.width + sx) * CHANNELS;
                for c in 0..CHANNELS {
                    acc[c] += w * img.data[base + c] as f64;
                }
            }
            let o = (y * ow + ox) * CHANNELS;
            tmp[o..o + CHANNELS].copy_from_slice(&acc);
        }
    }
    // vertical pass
    let mut data = vec![0.0f32; oh * ow * CHANNELS];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..ow {
            let mut acc = [0.0f64; 3];
            for &(sy, w) in taps {
                let base = (sy * ow + ox) * CHANNELS;
                for c in 0..CHANNELS {
                    acc[c] += w * tmp[base + c];
                }
            }
            let o = (oy * ow + ox) * CHANNELS;
            for c in 0..CHANNELS {
                data[o + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Raster { width: ow, height: oh, data })
}

/// Per-output-sample source taps `(index, weight)` along one axis; weights sum to 1.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    if n_out == n_in {
        return (0..n_in).map(|i| vec![(i, 1.0)]).collect();
    }
    let ratio = n_in as f64 / n_out as f64;
    if n_out > n_in {
        // bilinear, pixel centers aligned
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let f = src - i0 as f64;
                if i1 == i0 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            })
            .collect()
    } else {
        // box filter over the footprint [o*ratio, (o+1)*ratio)
        (0..n_out)
            .map(|o| {
                let lo = o as f64 * ratio;
                let hi = ((o + 1) as f64 * ratio).min(n_in as f64);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let a = lo.max(i as f64);
                    let b = hi.min((i + 1) as f64);
                    if b > a {
                        taps.push((i, (b - a) / (hi - lo)));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub source_width: usize,
    pub source_height: usize,
    /// `(scale, level)` in the order the scales were requested.
    pub levels: Vec<(f64, Raster)>,
}

impl Pyramid {
    pub fn level(&self, scale: f64) -> Option<&Raster> {
        self.levels.iter().find(|(s, _)| *s == scale).map(|(_, r)| r)
    }
}

pub fn build_pyramid(img: &Raster, scales: &[f64]) -> Result<Pyramid> {
    if scales.is_empty() {
        return Err(Error::Config("pyramid needs at least one scale".into()));
    }
    let levels = scales
        .par_iter()
        .map(|&s| resample(img, s).map(|r| (s, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { source_width: img.width, source_height: img.height, levels })
}

/// A fixed-size crop plus the region of it backed by real image pixels.
#[derive(Debug, Clone)]
pub struct Crop {
    pub raster: Raster,
    /// `true` where the pixel came from the source image.
    pub mask: Vec<bool>,
    /// Extent of the source image in crop coordinates; pixels outside are fill.
    pub valid: BBox,
}

impl Crop {
    pub fn filled_pixels(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

/// `size x size` window whose top-left corner is `(x, y)` in image coordinates;
/// samples outside the image take the value `fill`.
pub fn pad_crop(img: &Raster, x: i64, y: i64, size: usize, fill: [f32; 3]) -> Result<Crop> {
    if size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let mut raster = Raster::filled(size, size, fill);
    let mut mask = vec![false; size * size];
    let (w, h) = (img.width as i64, img.height as i64);
    let x0 = x.max(0);
    let x1 = (x + size as i64).min(w);
    let y0 = y.max(0);
    let y1 = (y + size as i64).min(h);
    if x0 < x1 && y0 < y1 {
        let run = (x1 - x0) as usize;
        for sy in y0..y1 {
            let cy = (sy - y) as usize;
            let cx = (x0 - x) as usize;
            let src = ((sy as usize) * img.width + x0 as usize) * CHANNELS;
            let dst = (cy * size + cx) * CHANNELS;
            raster.data[dst..dst + run * CHANNELS].copy_from_slice(&img.data[src..src + run * CHANNELS]);
            mask[cy * size + cx..cy * size + cx + run].iter_mut().for_each(|m| *m = true);
        }
    }
    let valid = BBox { x: -(x as f64), y: -(y as f64), w: img.width as f64, h: img.height as f64, score: 0.0 };
    Ok(Crop { raster, mask, valid })
}

// ---------------------------------------------------------------------------
// File formats

/// Reads a binary PPM (P6, maxval <= 255).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Raster> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(name, 1, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::parse(name, 1, format!("unsupported PPM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(name, 1, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::parse(name, 1, "unsupported PPM dimensions or maxval"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * CHANNELS;
    if bytes.len() < pos + need {
        return Err(Error::parse(name, 1, "truncated PPM pixel data"));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / maxval as f32).collect();
    Raster::new(w, h, data)
}

pub fn encode_ppm(img: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Lossless dump: little-endian `u32 width, u32 height, u32 channels`, then
/// row-major `f32` samples.
pub fn encode_f32raster(img: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.data.len() * 4);
    for v in [img.width as u32, img.height as u32, CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32raster(bytes: &[u8], name: &str) -> Result<Raster> {
    if bytes.len() < 12 {
        return Err(Error::parse(name, 1, "truncated f32raster header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    if c != CHANNELS {
        return Err(Error::parse(name, 1, format!("expected {CHANNELS} channels, got {c}")));
    }
    let n = w * h * c;
    if bytes.len() != 12 + 4 * n {
        return Err(Error::parse(name, 1, "f32raster payload length mismatch"));
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Raster::new(w, h, data)
}

pub fn write_f32raster(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_f32raster(img)).map_err(|e| Error::io(path, e))
}

pub fn read_f32raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32raster(&bytes, &path.display().to_string())
}

/// Reads `.ppm` or `.f32raster` by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32raster") => read_f32raster(path),
        _ => read_ppm(path),
    }
}
