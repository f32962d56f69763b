//! Fully-convolutional feature hierarchy with foveal multi-layer taps.
//!
//! The trunk downsamples three times to the stride-8 prediction grid; the
//! blocks after it keep that stride but widen the receptive field with
//! max pooling and dilated kernels. Every tap is resampled onto the stride-8
//! grid, concatenated, and fed to per-template 1x1 heads: one score logit and
//! four box-regression outputs per template.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::Template;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::pyramid::{Raster, CHANNELS};
use crate::tensor::{col2im, gemm, im2col, max_pool3, ConvGeom, Real, Tensor, Trans};

/// Stride of the prediction grid relative to the network input.
pub const GRID_STRIDE: usize = 8;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    /// 3x3 stride-1 max pooling applied to the block input.
    pub pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapKind {
    Fine,
    Mid,
    Coarse,
}

impl TapKind {
    pub const ALL: [TapKind; 3] = [TapKind::Fine, TapKind::Mid, TapKind::Coarse];

    pub fn name(&self) -> &'static str {
        match self {
            TapKind::Fine => "fine",
            TapKind::Mid => "mid",
            TapKind::Coarse => "coarse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapConfig {
    pub kind: TapKind,
    pub block: usize,
    /// Learning-rate multiplier for the head weights reading this tap.
    pub lr_mult: f64,
    /// Disabled taps feed zeros to the heads.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub blocks: Vec<BlockConfig>,
    pub taps: Vec<TapConfig>,
    /// Subtracted from every input sample before the first convolution.
    pub mean_rgb: [f64; 3],
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let b = |out_channels, stride, dilation, pool| BlockConfig { out_channels, stride, dilation, pool };
        NetConfig {
            blocks: vec![b(16, 2, 1, false), b(24, 2, 1, false), b(32, 2, 1, false), b(32, 1, 2, true), b(32, 1, 4, true)],
            taps: vec![
                TapConfig { kind: TapKind::Fine, block: 2, lr_mult: 0.01, enabled: true },
                TapConfig { kind: TapKind::Mid, block: 3, lr_mult: 0.1, enabled: true },
                TapConfig { kind: TapKind::Coarse, block: 4, lr_mult: 1.0, enabled: true },
            ],
            mean_rgb: [0.5; 3],
            seed: 0,
        }
    }
}

/// Receptive field of one tap, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapField {
    pub kind: TapKind,
    pub stride: usize,
    pub receptive_field: usize,
}

impl NetConfig {
    pub fn tap(&self, kind: TapKind) -> Option<&TapConfig> {
        self.taps.iter().find(|t| t.kind == kind)
    }

    pub fn set_tap_enabled(&mut self, kind: TapKind, enabled: bool) {
        for t in &mut self.taps {
            if t.kind == kind {
                t.enabled = enabled;
            }
        }
    }

    /// Cumulative stride after every block.
    pub fn block_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.blocks
            .iter()
            .map(|b| {
                s *= b.stride;
                s
            })
            .collect()
    }

    /// Receptive field after every block.
    pub fn block_fields(&self) -> Vec<usize> {
        let mut rf = 1;
        let mut jump = 1;
        self.blocks
            .iter()
            .map(|b| {
                if b.pool {
                    rf += 2 * jump;
                }
                rf += (KERNEL - 1) * b.dilation * jump;
                jump *= b.stride;
                rf
            })
            .collect()
    }

    pub fn tap_fields(&self) -> Vec<TapField> {
        let strides = self.block_strides();
        let fields = self.block_fields();
        self.taps
            .iter()
            .map(|t| TapField { kind: t.kind, stride: strides[t.block], receptive_field: fields[t.block] })
            .collect()
    }

    /// Number of feature channels seen by the heads.
    pub fn feature_dim(&self) -> usize {
        self.taps.iter().map(|t| self.blocks[t.block].out_channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.taps.is_empty() {
            return Err(Error::Config("network needs at least one block and one tap".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 || b.dilation == 0 {
                return Err(Error::Config(format!("block {i} has a zero dimension")));
            }
        }
        let strides = self.block_strides();
        for t in &self.taps {
            if t.block >= self.blocks.len() {
                return Err(Error::Config(format!("tap {} refers to missing block {}", t.kind.name(), t.block)));
            }
            let s = strides[t.block];
            if s < GRID_STRIDE || !s.is_multiple_of(GRID_STRIDE) {
                return Err(Error::Config(format!(
                    "tap {} has stride {s}; taps must sit on multiples of the stride-{GRID_STRIDE} grid",
                    t.kind.name()
                )));
            }
            if !(t.lr_mult > 0.0 && t.lr_mult.is_finite()) {
                return Err(Error::Config(format!("tap {} needs a positive multiplier", t.kind.name())));
            }
        }
        Ok(())
    }

    /// `key=value` lines, as embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}/{}/{}/{}", b.out_channels, b.stride, b.dilation, b.pool as u8))
            .collect();
        let _ = writeln!(s, "blocks={}", blocks.join(" "));
        for t in &self.taps {
            let _ = writeln!(s, "tap.{}={} {} {}", t.kind.name(), t.block, t.lr_mult, t.enabled as u8);
        }
        let _ = writeln!(s, "mean_rgb={} {} {}", self.mean_rgb[0], self.mean_rgb[1], self.mean_rgb[2]);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("network config: {m}"));
        let mut cfg = NetConfig { blocks: vec![], taps: vec![], mean_rgb: [0.5; 3], seed: 0 };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match k {
                "blocks" => {
                    for tok in v.split_whitespace() {
                        let p: Vec<usize> = tok
                            .split('/')
                            .map(|x| x.parse().map_err(|_| bad(format!("bad block {tok:?}"))))
                            .collect::<Result<_>>()?;
                        if p.len() != 4 {
                            return Err(bad(format!("bad block {tok:?}")));
                        }
                        cfg.blocks.push(BlockConfig { out_channels: p[0], stride: p[1], dilation: p[2], pool: p[3] != 0 });
                    }
                }
                "mean_rgb" => {
                    let m: Vec<f64> = v
                        .split_whitespace()
                        .map(|x| x.parse().map_err(|_| bad(format!("bad mean {v:?}"))))
                        .collect::<Result<_>>()?;
                    if m.len() != 3 {
                        return Err(bad("mean_rgb needs 3 values".into()));
                    }
                    cfg.mean_rgb = [m[0], m[1], m[2]];
                }
                "seed" => cfg.seed = v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?,
                _ if k.starts_with("tap.") => {
                    let kind = match &k[4..] {
                        "fine" => TapKind::Fine,
                        "mid" => TapKind::Mid,
                        "coarse" => TapKind::Coarse,
                        other => return Err(bad(format!("unknown tap {other:?}"))),
                    };
                    let f: Vec<&str> = v.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(bad(format!("bad tap {v:?}")));
                    }
                    cfg.taps.push(TapConfig {
                        kind,
                        block: f[0].parse().map_err(|_| bad(format!("bad tap {v:?}")))?,
                        lr_mult: f[1].parse().map_err(|_| bad(format!("bad tap {v:?}")))?,
                        enabled: f[2] != "0",
                    });
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Convolution kernel `(out, in, 3, 3)` and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<R> {
    pub weight: Vec<R>,
    pub bias: Vec<R>,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    pub convs: Vec<ConvParams<R>>,
    /// `(templates, feature_dim)`
    pub score_weight: Vec<R>,
    pub score_bias: Vec<R>,
    /// `(4 * templates, feature_dim)`, rows `4t..4t+4` belong to template `t`.
    pub reg_weight: Vec<R>,
    pub reg_bias: Vec<R>,
    pub templates: usize,
    pub feature_dim: usize,
}

/// Named view of one parameter tensor.
pub struct TensorRef<'a, R> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [R],
}

impl<R: Real> ModelParams<R> {
    /// Fan-in scaled uniform initialisation with zero biases.
    pub fn init(cfg: &NetConfig, templates: usize) -> Result<Self> {
        cfg.validate()?;
        if templates == 0 {
            return Err(Error::Config("the model needs at least one template".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform = |n: usize, bound: f64| -> Vec<R> {
            (0..n).map(|_| R::from_f64(rng.gen_range(-bound..bound))).collect()
        };
        let mut convs = Vec::new();
        let mut cin = CHANNELS;
        for b in &cfg.blocks {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            convs.push(ConvParams {
                weight: uniform(b.out_channels * cin * KERNEL * KERNEL, (6.0 / fan_in).sqrt()),
                bias: vec![R::ZERO; b.out_channels],
                in_channels: cin,
                out_channels: b.out_channels,
            });
            cin = b.out_channels;
        }
        let d = cfg.feature_dim();
        let head_bound = (1.0 / d as f64).sqrt();
        let score_weight = uniform(templates * d, head_bound);
        let reg_weight = uniform(4 * templates * d, 0.1 * head_bound);
        Ok(ModelParams {
            convs,
            score_weight,
            score_bias: vec![R::ZERO; templates],
            reg_weight,
            reg_bias: vec![R::ZERO; 4 * templates],
            templates,
            feature_dim: d,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<R>| vec![R::ZERO; v.len()];
        ModelParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams { weight: z(&c.weight), bias: z(&c.bias), ..*c })
                .collect(),
            score_weight: z(&self.score_weight),
            score_bias: z(&self.score_bias),
            reg_weight: z(&self.reg_weight),
            reg_bias: z(&self.reg_bias),
            templates: self.templates,
            feature_dim: self.feature_dim,
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, R>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(TensorRef {
                name: format!("block{i}.weight"),
                dims: vec![c.out_channels, c.in_channels, KERNEL, KERNEL],
                data: &c.weight,
            });
            out.push(TensorRef { name: format!("block{i}.bias"), dims: vec![c.out_channels], data: &c.bias });
        }
        let (t, d) = (self.templates, self.feature_dim);
        out.push(TensorRef { name: "head.score.weight".into(), dims: vec![t, d], data: &self.score_weight });
        out.push(TensorRef { name: "head.score.bias".into(), dims: vec![t], data: &self.score_bias });
        out.push(TensorRef { name: "head.reg.weight".into(), dims: vec![4 * t, d], data: &self.reg_weight });
        out.push(TensorRef { name: "head.reg.bias".into(), dims: vec![4 * t], data: &self.reg_bias });
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out: Vec<&mut Vec<R>> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.score_weight);
        out.push(&mut self.score_bias);
        out.push(&mut self.reg_weight);
        out.push(&mut self.reg_bias);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Fails with the name and position of the first non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite parameter {}[{i}]", t.name)));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Scales the head-weight columns reading each tap by its multiplier.
    pub fn scale_tap_columns(&mut self, cfg: &NetConfig) {
        let d = self.feature_dim;
        let mut offset = 0;
        for t in &cfg.taps {
            let width = cfg.blocks[t.block].out_channels;
            let m = R::from_f64(t.lr_mult);
            for w in [&mut self.score_weight, &mut self.reg_weight] {
                for row in w.chunks_exact_mut(d) {
                    for v in &mut row[offset..offset + width] {
                        *v *= m;
                    }
                }
            }
            offset += width;
        }
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        let c = |v: &Vec<R>| v.iter().map(|x| S::from_f64(x.to_f64())).collect::<Vec<S>>();
        ModelParams {
            convs: self
                .convs
                .iter()
                .map(|p| ConvParams {
                    weight: c(&p.weight),
                    bias: c(&p.bias),
                    in_channels: p.in_channels,
                    out_channels: p.out_channels,
                })
                .collect(),
            score_weight: c(&self.score_weight),
            score_bias: c(&self.score_bias),
            reg_weight: c(&self.reg_weight),
            reg_bias: c(&self.reg_bias),
            templates: self.templates,
            feature_dim: self.feature_dim,
        }
    }
}

/// Per-template score logits and regression outputs on the stride-8 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub grid_w: usize,
    pub grid_h: usize,
    pub templates: usize,
    /// `(templates, grid_h, grid_w)`
    pub logits: Vec<f64>,
    /// `(4 * templates, grid_h, grid_w)`; component `j` of template `t` is plane `4t + j`.
    pub regression: Vec<f64>,
}

impl HeatmapStack {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    #[inline]
    pub fn logit(&self, t: usize, gx: usize, gy: usize) -> f64 {
        self.logits[t * self.cells() + gy * self.grid_w + gx]
    }

    #[inline]
    pub fn reg(&self, t: usize, gx: usize, gy: usize) -> [f64; 4] {
        let g = self.cells();
        let c = gy * self.grid_w + gx;
        [0, 1, 2, 3].map(|j| self.regression[(4 * t + j) * g + c])
    }

    pub fn zeros_like(&self) -> HeatmapStack {
        HeatmapStack {
            logits: vec![0.0; self.logits.len()],
            regression: vec![0.0; self.regression.len()],
            ..*self
        }
    }
}

struct BlockCache<R> {
    /// Block input after optional pooling.
    pooled: Tensor<R>,
    /// Flat input index chosen by each pooled element.
    argmax: Option<Vec<u32>>,
    input_dims: (usize, usize, usize),
    output: Tensor<R>,
}

/// Activations retained by a forward pass for the backward pass.
pub struct ForwardCache<R> {
    blocks: Vec<BlockCache<R>>,
    /// Concatenated tap features, `(feature_dim, grid_h, grid_w)`.
    pub features: Tensor<R>,
}

impl<R: Real> ForwardCache<R> {
    /// Foveal descriptor (all taps) at one grid cell.
    pub fn feature_at(&self, gx: usize, gy: usize) -> Vec<f64> {
        let f = &self.features;
        (0..f.c).map(|c| f.at(c, gy, gx).to_f64()).collect()
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet<R = f32> {
    pub config: NetConfig,
    pub params: ModelParams<R>,
}

impl<R: Real> FeatureNet<R> {
    pub fn new(config: NetConfig, templates: usize) -> Result<Self> {
        let params = ModelParams::init(&config, templates)?;
        Ok(FeatureNet { config, params })
    }

    pub fn from_parts(config: NetConfig, params: ModelParams<R>) -> Result<Self> {
        config.validate()?;
        if params.convs.len() != config.blocks.len() || params.feature_dim != config.feature_dim() {
            return Err(Error::Shape("parameters do not match the network configuration".into()));
        }
        let mut cin = CHANNELS;
        for (p, b) in params.convs.iter().zip(&config.blocks) {
            if p.in_channels != cin || p.out_channels != b.out_channels {
                return Err(Error::Shape("convolution widths do not match the configuration".into()));
            }
            cin = b.out_channels;
        }
        Ok(FeatureNet { config, params })
    }

    pub fn templates(&self) -> usize {
        self.params.templates
    }

    /// Grid dimensions for an input of the given size.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(GRID_STRIDE), height.div_ceil(GRID_STRIDE))
    }

    pub fn forward(&self, img: &Raster) -> Result<HeatmapStack> {
        self.forward_cached(img).map(|(h, _)| h)
    }

    pub fn forward_cached(&self, img: &Raster) -> Result<(HeatmapStack, ForwardCache<R>)> {
        if img.width() < GRID_STRIDE || img.height() < GRID_STRIDE {
            return Err(Error::Data(format!(
                "input {}x{} is smaller than the {GRID_STRIDE}px grid stride",
                img.width(),
                img.height()
            )));
        }
        self.params.check_finite()?;
        let mut x = self.input_tensor(img);
        let mut blocks = Vec::with_capacity(self.config.blocks.len());
        let mut cols = Vec::new();
        for (b, p) in self.config.blocks.iter().zip(&self.params.convs) {
            let input_dims = (x.c, x.h, x.w);
            let (pooled, argmax) = if b.pool {
                let (t, a) = max_pool3(&x);
                (t, Some(a))
            } else {
                (x, None)
            };
            let g = ConvGeom { kernel: KERNEL, stride: b.stride, dilation: b.dilation };
            let mut out = conv2d(&pooled, p, g, &mut cols);
            for v in &mut out.data {
                if !(*v > R::ZERO) {
                    *v = R::ZERO;
                }
            }
            x = out.clone();
            blocks.push(BlockCache { pooled, argmax, input_dims, output: out });
        }

        let (gw, gh) = self.grid_dims(img.width(), img.height());
        let features = self.gather_taps(&blocks, gw, gh);
        let heat = self.heads(&features);
        Ok((heat, ForwardCache { blocks, features }))
    }

    fn input_tensor(&self, img: &Raster) -> Tensor<R> {
        let (w, h) = (img.width(), img.height());
        let mut t = Tensor::zeros(CHANNELS, h, w);
        let plane = w * h;
        for (i, px) in img.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                t.data[c * plane + i] = R::from_f64(px[c] as f64 - self.config.mean_rgb[c]);
            }
        }
        t
    }

    fn gather_taps(&self, blocks: &[BlockCache<R>], gw: usize, gh: usize) -> Tensor<R> {
        let strides = self.config.block_strides();
        let mut f = Tensor::zeros(self.config.feature_dim(), gh, gw);
        let mut offset = 0;
        for tap in &self.config.taps {
            let src = &blocks[tap.block].output;
            let factor = strides[tap.block] / GRID_STRIDE;
            if tap.enabled {
                for c in 0..src.c {
                    for gy in 0..gh {
                        let sy = (gy / factor).min(src.h - 1);
                        for gx in 0..gw {
                            let sx = (gx / factor).min(src.w - 1);
                            f.data[((offset + c) * gh + gy) * gw + gx] = src.at(c, sy, sx);
                        }
                    }
                }
            }
            offset += src.c;
        }
        f
    }

    fn heads(&self, f: &Tensor<R>) -> HeatmapStack {
        let p = &self.params;
        let (t, d, g) = (p.templates, p.feature_dim, f.plane());
        let mut logits = vec![R::ZERO; t * g];
        for (i, row) in logits.chunks_exact_mut(g).enumerate() {
            row.fill(p.score_bias[i]);
        }
        gemm(Trans::N, Trans::N, t, d, g, &p.score_weight, &f.data, R::ONE, &mut logits);
        let mut reg = vec![R::ZERO; 4 * t * g];
        for (i, row) in reg.chunks_exact_mut(g).enumerate() {
            row.fill(p.reg_bias[i]);
        }
        gemm(Trans::N, Trans::N, 4 * t, d, g, &p.reg_weight, &f.data, R::ONE, &mut reg);
        HeatmapStack {
            grid_w: f.w,
            grid_h: f.h,
            templates: t,
            logits: logits.into_iter().map(R::to_f64).collect(),
            regression: reg.into_iter().map(R::to_f64).collect(),
        }
    }

    /// Exact gradients of a loss with respect to every parameter, given the
    /// loss gradient with respect to the heatmaps of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<R>, grad: &HeatmapStack) -> Result<ModelParams<R>> {
        let p = &self.params;
        let f = &cache.features;
        let (t, d, g) = (p.templates, p.feature_dim, f.plane());
        if grad.templates != t || grad.grid_w != f.w || grad.grid_h != f.h {
            return Err(Error::Shape(format!(
                "heatmap gradient is {}x{}x{}, forward produced {}x{}x{}",
                grad.templates, grad.grid_h, grad.grid_w, t, f.h, f.w
            )));
        }
        let mut grads = p.zeros_like();
        let dlogit: Vec<R> = grad.logits.iter().map(|&v| R::from_f64(v)).collect();
        let dreg: Vec<R> = grad.regression.iter().map(|&v| R::from_f64(v)).collect();

        gemm(Trans::N, Trans::T, t, g, d, &dlogit, &f.data, R::ZERO, &mut grads.score_weight);
        gemm(Trans::N, Trans::T, 4 * t, g, d, &dreg, &f.data, R::ZERO, &mut grads.reg_weight);
        for (b, row) in grads.score_bias.iter_mut().zip(dlogit.chunks_exact(g)) {
            *b = row.iter().fold(R::ZERO, |a, &v| a + v);
        }
        for (b, row) in grads.reg_bias.iter_mut().zip(dreg.chunks_exact(g)) {
            *b = row.iter().fold(R::ZERO, |a, &v| a + v);
        }

        // dF = Ws^T dlogit + Wr^T dreg
        let mut dfeat = vec![R::ZERO; d * g];
        gemm(Trans::T, Trans::N, d, t, g, &p.score_weight, &dlogit, R::ZERO, &mut dfeat);
        gemm(Trans::T, Trans::N, d, 4 * t, g, &p.reg_weight, &dreg, R::ONE, &mut dfeat);

        // scatter into block output gradients
        let strides = self.config.block_strides();
        let mut douts: Vec<Tensor<R>> =
            cache.blocks.iter().map(|b| Tensor::zeros(b.output.c, b.output.h, b.output.w)).collect();
        let mut offset = 0;
        for tap in &self.config.taps {
            let dst = &mut douts[tap.block];
            let factor = strides[tap.block] / GRID_STRIDE;
            if tap.enabled {
                for c in 0..dst.c {
                    for gy in 0..f.h {
                        let sy = (gy / factor).min(dst.h - 1);
                        for gx in 0..f.w {
                            let sx = (gx / factor).min(dst.w - 1);
                            let v = dfeat[((offset + c) * f.h + gy) * f.w + gx];
                            let idx = (c * dst.h + sy) * dst.w + sx;
                            dst.data[idx] += v;
                        }
                    }
                }
            }
            offset += dst.c;
        }

        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for bi in (0..self.config.blocks.len()).rev() {
            let b = &self.config.blocks[bi];
            let bc = &cache.blocks[bi];
            let mut dz = std::mem::replace(&mut douts[bi], Tensor::zeros(0, 0, 0));
            for (gz, &y) in dz.data.iter_mut().zip(&bc.output.data) {
                if !(y > R::ZERO) {
                    *gz = R::ZERO;
                }
            }
            let geom = ConvGeom { kernel: KERNEL, stride: b.stride, dilation: b.dilation };
            let (ho, wo) = im2col(&bc.pooled, geom, &mut cols);
            let npix = ho * wo;
            let ck = bc.pooled.c * KERNEL * KERNEL;
            let gp = &mut grads.convs[bi];
            gemm(Trans::N, Trans::T, b.out_channels, npix, ck, &dz.data, &cols, R::ZERO, &mut gp.weight);
            for (gb, row) in gp.bias.iter_mut().zip(dz.data.chunks_exact(npix)) {
                *gb = row.iter().fold(R::ZERO, |a, &v| a + v);
            }
            if bi == 0 {
                break;
            }
            dcols.clear();
            dcols.resize(ck * npix, R::ZERO);
            gemm(Trans::T, Trans::N, ck, b.out_channels, npix, &p.convs[bi].weight, &dz.data, R::ZERO, &mut dcols);
            let mut dpooled = Tensor::zeros(bc.pooled.c, bc.pooled.h, bc.pooled.w);
            col2im(&dcols, geom, ho, wo, &mut dpooled);
            let (c, h, w) = bc.input_dims;
            let prev = &mut douts[bi - 1];
            debug_assert_eq!((prev.c, prev.h, prev.w), (c, h, w));
            match &bc.argmax {
                Some(arg) => {
                    for (v, &src) in dpooled.data.iter().zip(arg) {
                        prev.data[src as usize] += *v;
                    }
                }
                None => {
                    for (a, v) in prev.data.iter_mut().zip(&dpooled.data) {
                        *a += *v;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Zero-padded 3x3 cross-correlation plus bias, no activation.
pub fn conv2d<R: Real>(x: &Tensor<R>, p: &ConvParams<R>, g: ConvGeom, cols: &mut Vec<R>) -> Tensor<R> {
    assert_eq!(x.c, p.in_channels, "conv input channels");
    let (ho, wo) = im2col(x, g, cols);
    let npix = ho * wo;
    let mut out = Tensor::zeros(p.out_channels, ho, wo);
    for (o, row) in out.data.chunks_exact_mut(npix).enumerate() {
        row.fill(p.bias[o]);
    }
    gemm(Trans::N, Trans::N, p.out_channels, x.c * g.kernel * g.kernel, npix, &p.weight, cols, R::ONE, &mut out.data);
    out
}

/// Window scored by grid cell `(gx, gy)` of `template`, in the coordinates of
/// the original image when the network ran on a pyramid level of `scale`.
pub fn grid_to_window(gx: usize, gy: usize, template: &Template, scale: f64) -> BBox {
    let s = GRID_STRIDE as f64;
    let cx = (gx as f64 + 0.5) * s;
    let cy = (gy as f64 + 0.5) * s;
    BBox::from_center(cx / scale, cy / scale, template.canonical_w / scale, template.canonical_h / scale)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"TINYFACE";
const CKPT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, length-prefixed config text, then named
/// tensors with dimensions and little-endian `f32` values.
pub fn encode_checkpoint<R: Real>(net: &FeatureNet<R>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = net.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = net.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint<R: Real>(bytes: &[u8]) -> Result<FeatureNet<R>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
    let config = NetConfig::from_text(text)?;
    let count = r.u32()? as usize;
    let mut loaded: Vec<(String, Vec<usize>, Vec<R>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Data("bad tensor name".into()))?;
        let nd = r.u32()? as usize;
        let dims: Vec<usize> = (0..nd).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(4 * len)?;
        let data = raw.chunks_exact(4).map(|b| R::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
        loaded.push((name, dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    let templates = loaded
        .iter()
        .find(|(n, _, _)| n == "head.score.bias")
        .map(|(_, d, _)| d[0])
        .ok_or_else(|| Error::Data("checkpoint lacks head.score.bias".into()))?;
    let mut params = ModelParams::<R>::init(&config, templates)?;
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
    if expected.len() != loaded.len() {
        return Err(Error::Shape("checkpoint tensor count does not match its configuration".into()));
    }
    for ((slot, (name, dims)), (lname, ldims, data)) in params.tensors_mut().into_iter().zip(expected).zip(loaded) {
        if name != lname || dims != ldims {
            return Err(Error::Shape(format!("checkpoint tensor {lname} {ldims:?} where {name} {dims:?} expected")));
        }
        *slot = data;
    }
    params.check_finite()?;
    FeatureNet::from_parts(config, params)
}

pub fn save_checkpoint<R: Real>(net: &FeatureNet<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> Result<FeatureNet<R>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::TemplateSet;

    fn tiny_config() -> NetConfig {
        let b = |out_channels, stride, dilation, pool| BlockConfig { out_channels, stride, dilation, pool };
        NetConfig {
            blocks: vec![b(2, 2, 1, false), b(3, 2, 1, false), b(3, 2, 1, false), b(2, 1, 2, true), b(2, 1, 4, true)],
            ..NetConfig::default()
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let mut net = FeatureNet::<f64>::new(tiny_config(), 3).unwrap();
        for v in net.params.score_weight.iter_mut().chain(net.params.reg_weight.iter_mut()) {
            *v = 0.0;
        }
        let h = net.forward(&noise(64, 64, 1)).unwrap();
        assert_eq!((h.grid_w, h.grid_h), (8, 8));
        assert!(h.logits.iter().all(|&v| v == 0.0));
        assert!(h.regression.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_dims_round_up() {
        let net = FeatureNet::<f32>::new(NetConfig::default(), 1).unwrap();
        let h = net.forward(&noise(65, 17, 2)).unwrap();
        assert_eq!((h.grid_w, h.grid_h), (9, 3));
    }

    #[test]
    fn rejects_tiny_inputs_and_bad_params() {
        let mut net = FeatureNet::<f32>::new(NetConfig::default(), 1).unwrap();
        assert!(net.forward(&noise(7, 20, 0)).is_err());
        net.params.convs[1].weight[3] = f32::NAN;
        match net.forward(&noise(16, 16, 0)) {
            Err(Error::Numerical(m)) => assert!(m.contains("block1.weight[3]"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = FeatureNet::<f64>::new(tiny_config(), 2).unwrap();
        let (h, cache) = net.forward_cached(&noise(16, 16, 3)).unwrap();
        let g = net.backward(&cache, &h.zeros_like()).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let net = FeatureNet::<f64>::new(tiny_config(), 2).unwrap();
        let (h, cache) = net.forward_cached(&noise(24, 16, 4)).unwrap();
        let mut up = h.zeros_like();
        for (i, v) in up.logits.iter_mut().chain(up.regression.iter_mut()).enumerate() {
            *v = ((i * 7919 % 13) as f64 - 6.0) / 6.0;
        }
        let g1 = net.backward(&cache, &up).unwrap();
        let mut up2 = up.clone();
        up2.logits.iter_mut().chain(up2.regression.iter_mut()).for_each(|v| *v *= 2.0);
        let g2 = net.backward(&cache, &up2).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let net = FeatureNet::<f64>::new(tiny_config(), 2).unwrap();
        let (h, cache) = net.forward_cached(&noise(16, 16, 5)).unwrap();
        let mut bad = h.zeros_like();
        bad.grid_w += 1;
        assert!(matches!(net.backward(&cache, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_of_delta_is_flipped_kernel() {
        let w: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let p = ConvParams { weight: w.clone(), bias: vec![0.5], in_channels: 1, out_channels: 1 };
        let mut x = Tensor::zeros(1, 5, 5);
        x.data[2 * 5 + 2] = 1.0;
        let g = ConvGeom { kernel: 3, stride: 1, dilation: 1 };
        let y = conv2d(&x, &p, g, &mut Vec::new());
        // direct correlation: y[i][j] = b + sum_{u,v} w[u][v] x[i+u-1][j+v-1]
        for i in 0..5 {
            for j in 0..5 {
                let mut want = 0.5;
                for u in 0..3 {
                    for v in 0..3 {
                        let (yy, xx) = (i as i64 + u as i64 - 1, j as i64 + v as i64 - 1);
                        if (0..5).contains(&yy) && (0..5).contains(&xx) {
                            want += w[u * 3 + v] * x.data[(yy * 5 + xx) as usize];
                        }
                    }
                }
                assert_eq!(y.at(0, i, j), want);
            }
        }
        assert_eq!(y.at(0, 1, 1), 9.5);
        assert_eq!(y.at(0, 3, 3), 1.5);
    }

    #[test]
    fn windows_follow_the_grid() {
        let t = Template::new(40.0, 40.0, 1.0, TemplateSet::A, 0);
        let b = grid_to_window(0, 0, &t, 1.0);
        assert_eq!((b.cx(), b.cy(), b.w, b.h), (4.0, 4.0, 40.0, 40.0));
        let b = grid_to_window(0, 0, &t, 2.0);
        assert_eq!((b.cx(), b.cy(), b.w, b.h), (2.0, 2.0, 20.0, 20.0));
    }

    #[test]
    fn receptive_fields() {
        let cfg = NetConfig::default();
        let f = cfg.tap_fields();
        assert_eq!(f[0].stride, 8);
        assert_eq!(f[0].receptive_field, 15);
        assert!(f[2].receptive_field > f[1].receptive_field);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = NetConfig::default();
        cfg.set_tap_enabled(TapKind::Fine, false);
        cfg.mean_rgb = [0.25, 0.5, 0.125];
        assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = FeatureNet::<f32>::new(NetConfig::default(), 4).unwrap();
        let back: FeatureNet<f32> = decode_checkpoint(&encode_checkpoint(&net)).unwrap();
        assert_eq!(back, net);
        let bytes = encode_checkpoint(&net);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"NOTACKPT").is_err());
    }
}
