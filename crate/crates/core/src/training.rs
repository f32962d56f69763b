//! Training protocol: label assignment with border masking, logistic and
//! Huber losses, hard mining with balanced sampling, input sampling and the
//! SGD loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::{TemplateBank, PYRAMID_SCALES};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::{ap, GroundTruth};
use crate::geometry::{iou, BBox};
use crate::inference::{detect, DetectConfig};
use crate::net::{grid_to_window, save_checkpoint, FeatureNet, HeatmapStack, ModelParams, NetConfig};
use crate::pyramid::{pad_crop, resample, Raster};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub epochs: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub hard_mining: bool,
    pub mining_loss_threshold: f64,
    pub mining_cap: usize,
    pub scales: Vec<f64>,
    /// Weight of the regression term relative to classification.
    pub reg_weight: f64,
    /// How each image's loss is reduced over its selected cells.
    pub normalization: LossNormalization,
    pub seed: u64,
    /// Evaluate validation AP every this many epochs (and after the last).
    pub val_every: usize,
    /// Score threshold used for validation detections.
    pub val_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 20,
            crop: 500,
            epochs: 50,
            pos_iou: 0.7,
            neg_iou: 0.3,
            hard_mining: true,
            mining_loss_threshold: 0.03,
            mining_cap: 128,
            scales: PYRAMID_SCALES.to_vec(),
            reg_weight: 1.0,
            normalization: LossNormalization::Sum,
            seed: 0,
            val_every: 5,
            val_threshold: 0.05,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "lr",
    "weight_decay",
    "momentum",
    "batch_size",
    "crop",
    "epochs",
    "pos_iou",
    "neg_iou",
    "hard_mining",
    "mining_loss_threshold",
    "mining_cap",
    "scales",
    "reg_weight",
    "normalization",
    "seed",
    "val_every",
    "val_threshold",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNormalization {
    /// Sum over selected cells.
    Sum,
    /// Mean over selected cells.
    Mean,
}

impl LossNormalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossNormalization::Sum => "sum",
            LossNormalization::Mean => "mean",
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return bad("need 0 <= neg_iou < pos_iou <= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.mining_cap == 0 || self.val_every == 0 {
            return bad("batch_size, epochs, mining_cap and val_every must be positive");
        }
        if self.crop < 64 {
            return bad("crop must be at least 64");
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return bad("scales must be positive");
        }
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            return bad("val_threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let scales: Vec<String> = self.scales.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "crop={}", self.crop);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "pos_iou={}", self.pos_iou);
        let _ = writeln!(s, "neg_iou={}", self.neg_iou);
        let _ = writeln!(s, "hard_mining={}", self.hard_mining);
        let _ = writeln!(s, "mining_loss_threshold={}", self.mining_loss_threshold);
        let _ = writeln!(s, "mining_cap={}", self.mining_cap);
        let _ = writeln!(s, "scales={}", scales.join(","));
        let _ = writeln!(s, "reg_weight={}", self.reg_weight);
        let _ = writeln!(s, "normalization={}", self.normalization.as_str());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "val_every={}", self.val_every);
        let _ = writeln!(s, "val_threshold={}", self.val_threshold);
        s
    }

    /// Defaults overridden by the keys present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut c = TrainConfig::default();
        kv.read_into("lr", &mut c.lr)?;
        kv.read_into("weight_decay", &mut c.weight_decay)?;
        kv.read_into("momentum", &mut c.momentum)?;
        kv.read_into("batch_size", &mut c.batch_size)?;
        kv.read_into("crop", &mut c.crop)?;
        kv.read_into("epochs", &mut c.epochs)?;
        kv.read_into("pos_iou", &mut c.pos_iou)?;
        kv.read_into("neg_iou", &mut c.neg_iou)?;
        kv.read_into("hard_mining", &mut c.hard_mining)?;
        kv.read_into("mining_loss_threshold", &mut c.mining_loss_threshold)?;
        kv.read_into("mining_cap", &mut c.mining_cap)?;
        kv.read_into("reg_weight", &mut c.reg_weight)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("val_every", &mut c.val_every)?;
        kv.read_into("val_threshold", &mut c.val_threshold)?;
        if let Some(v) = kv.get("normalization") {
            c.normalization = match v {
                "sum" => LossNormalization::Sum,
                "mean" => LossNormalization::Mean,
                other => return Err(Error::Config(format!("unknown normalization {other:?}"))),
            };
        }
        if let Some(v) = kv.get("scales") {
            c.scales = v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad scale list {v:?}"))))
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text, source)?)
    }
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per channel and cell, index `channel * cells + gy * grid_w + gx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub templates: usize,
    pub labels: Vec<Label>,
    /// Regression targets, meaningful for positive cells only.
    pub targets: Vec<[f64; 4]>,
}

impl LabelGrid {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn index(&self, channel: usize, gx: usize, gy: usize) -> usize {
        channel * self.cells() + gy * self.grid_w + gx
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Labels every window of the channels active at `scale`. `gt` and `valid`
/// are in network-input coordinates; windows not inside `valid` are ignored,
/// as are all cells of inactive channels.
pub fn assign_labels(
    gt: &[BBox],
    bank: &TemplateBank,
    grid: (usize, usize),
    scale: f64,
    valid: &BBox,
    pos_iou: f64,
    neg_iou: f64,
) -> LabelGrid {
    let (gw, gh) = grid;
    let t = bank.len();
    let mut out = LabelGrid {
        grid_w: gw,
        grid_h: gh,
        templates: t,
        labels: vec![Label::Ignore; t * gw * gh],
        targets: vec![[0.0; 4]; t * gw * gh],
    };
    for c in bank.active_channels(scale) {
        let tpl = &bank.templates[c];
        for gy in 0..gh {
            for gx in 0..gw {
                let window = grid_to_window(gx, gy, tpl, 1.0);
                if !window.is_inside(valid) {
                    continue;
                }
                let mut best = (0.0, usize::MAX);
                for (k, g) in gt.iter().enumerate() {
                    let o = iou(&window, g);
                    if o > best.0 {
                        best = (o, k);
                    }
                }
                let i = out.index(c, gx, gy);
                if best.0 > pos_iou {
                    out.labels[i] = Label::Positive;
                    out.targets[i] = box_regress_targets(&window, &gt[best.1]);
                } else if best.0 < neg_iou {
                    out.labels[i] = Label::Negative;
                }
            }
        }
    }
    out
}

/// Center-offset and log-size deltas from `anchor` to `gt`.
pub fn box_regress_targets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx() - anchor.cx()) / anchor.w,
        (gt.cy() - anchor.cy()) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Upper bound on predicted log-size deltas, keeping decoded boxes finite.
pub const MAX_LOG_DELTA: f64 = 4.0;

pub fn apply_box_regression(anchor: &BBox, t: [f64; 4]) -> BBox {
    let cx = anchor.cx() + t[0] * anchor.w;
    let cy = anchor.cy() + t[1] * anchor.h;
    let w = anchor.w * t[2].min(MAX_LOG_DELTA).exp();
    let h = anchor.h * t[3].min(MAX_LOG_DELTA).exp();
    let mut b = BBox::from_center(cx, cy, w, h);
    b.score = anchor.score;
    b
}

// ---------------------------------------------------------------------------
// Losses

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic loss of one logit and its derivative.
pub fn logistic_loss(z: f64, positive: bool) -> (f64, f64) {
    let p = crate::inference::sigmoid(z);
    if positive {
        (softplus(-z), p - 1.0)
    } else {
        (softplus(z), p)
    }
}

/// Summed logistic loss over cells with a target; `None` cells are excluded.
pub fn classification_loss(logits: &[f64], targets: &[Option<bool>]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len(), "logits and targets differ in length");
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, t)| match t {
            Some(pos) => {
                let (l, g) = logistic_loss(z, *pos);
                loss += l;
                g
            }
            None => 0.0,
        })
        .collect();
    (loss, grad)
}

/// Huber loss: quadratic within `delta`, linear outside.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * d.signum())
    }
}

/// Cells selected for the loss: after dropping easy cells (when mining), at
/// most `cap` positives and `cap` negatives drawn uniformly. Sorted indices.
pub fn mine_and_sample(losses: &[f64], labels: &[Label], cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (&l, lab)) in losses.iter().zip(labels).enumerate() {
        if cfg.hard_mining && l <= cfg.mining_loss_threshold {
            continue;
        }
        match lab {
            Label::Positive => pos.push(i),
            Label::Negative => neg.push(i),
            Label::Ignore => {}
        }
    }
    let mut out = Vec::new();
    for set in [pos, neg] {
        if set.len() <= cfg.mining_cap {
            out.extend(set);
        } else {
            out.extend(sample(rng, set.len(), cfg.mining_cap).into_iter().map(|k| set[k]));
        }
    }
    out.sort_unstable();
    out
}

/// Loss of one image and its gradient with respect to the heatmaps.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    /// Objective over the selected cells.
    pub objective: f64,
    /// Mean logistic loss over all labeled cells.
    pub mean_cls: f64,
    /// Mean Huber loss (summed over the 4 outputs) over all positive cells.
    pub mean_reg: f64,
    pub labeled: usize,
    pub positives: usize,
    pub selected: Vec<usize>,
    pub grad: HeatmapStack,
}

pub fn image_loss(heat: &HeatmapStack, labels: &LabelGrid, cfg: &TrainConfig, rng: &mut impl Rng) -> ImageLoss {
    assert_eq!(heat.logits.len(), labels.labels.len(), "heatmap and label grid disagree");
    let cells = labels.cells();
    let mut losses = vec![0.0; labels.labels.len()];
    let (mut cls_sum, mut labeled) = (0.0, 0usize);
    let (mut reg_sum, mut positives) = (0.0, 0usize);
    for (i, lab) in labels.labels.iter().enumerate() {
        if *lab == Label::Ignore {
            continue;
        }
        let (l, _) = logistic_loss(heat.logits[i], *lab == Label::Positive);
        losses[i] = l;
        cls_sum += l;
        labeled += 1;
        if *lab == Label::Positive {
            let (c, cell) = (i / cells, i % cells);
            for j in 0..4 {
                reg_sum += huber_loss(heat.regression[(4 * c + j) * cells + cell], labels.targets[i][j], 1.0).0;
            }
            positives += 1;
        }
    }
    let selected = mine_and_sample(&losses, &labels.labels, cfg, rng);
    let mut grad = heat.zeros_like();
    let mut objective = 0.0;
    for &i in &selected {
        let positive = labels.labels[i] == Label::Positive;
        let (l, g) = logistic_loss(heat.logits[i], positive);
        objective += l;
        grad.logits[i] = g;
        if positive {
            let (c, cell) = (i / cells, i % cells);
            for j in 0..4 {
                let k = (4 * c + j) * cells + cell;
                let (l, g) = huber_loss(heat.regression[k], labels.targets[i][j], 1.0);
                objective += cfg.reg_weight * l;
                grad.regression[k] = cfg.reg_weight * g;
            }
        }
    }
    if cfg.normalization == LossNormalization::Mean && !selected.is_empty() {
        let k = 1.0 / selected.len() as f64;
        objective *= k;
        grad.logits.iter_mut().chain(grad.regression.iter_mut()).for_each(|g| *g *= k);
    }
    ImageLoss {
        objective,
        mean_cls: if labeled > 0 { cls_sum / labeled as f64 } else { 0.0 },
        mean_reg: if positives > 0 { reg_sum / positives as f64 } else { 0.0 },
        labeled,
        positives,
        selected,
        grad,
    }
}

// ---------------------------------------------------------------------------
// Input sampling

#[derive(Debug, Clone)]
pub struct TrainImage {
    pub image: Raster,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Raster,
    /// Ground truth in crop coordinates.
    pub gt: Vec<BBox>,
    /// Part of the crop backed by image pixels.
    pub valid: BBox,
    pub mask: Vec<bool>,
    pub scale: f64,
    /// Crop corner in the rescaled image.
    pub origin: (i64, i64),
}

/// Rescales by a random pyramid scale and cuts a random crop, padding with
/// `fill` where the crop leaves the image.
pub fn sample_input(img: &TrainImage, cfg: &TrainConfig, fill: [f32; 3], rng: &mut impl Rng) -> Result<TrainSample> {
    let scale = cfg.scales[rng.gen_range(0..cfg.scales.len())];
    let scaled = resample(&img.image, scale)?;
    let c = cfg.crop as i64;
    let pick = |rng: &mut _, n: usize| {
        let (a, b) = ((n as i64 - c).min(0), (n as i64 - c).max(0));
        Rng::gen_range(rng, a..=b)
    };
    let x = pick(rng, scaled.width());
    let y = pick(rng, scaled.height());
    let crop = pad_crop(&scaled, x, y, cfg.crop, fill)?;
    let bounds = BBox { x: 0.0, y: 0.0, w: cfg.crop as f64, h: cfg.crop as f64, score: 0.0 };
    let vx0 = crop.valid.x.max(0.0);
    let vy0 = crop.valid.y.max(0.0);
    let vx1 = crop.valid.right().min(bounds.w);
    let vy1 = crop.valid.bottom().min(bounds.h);
    let valid = BBox { x: vx0, y: vy0, w: (vx1 - vx0).max(0.0), h: (vy1 - vy0).max(0.0), score: 0.0 };
    let gt = img.boxes.iter().map(|b| b.scaled(scale, scale).translated(-(x as f64), -(y as f64))).collect();
    Ok(TrainSample { input: crop.raster, gt, valid, mask: crop.mask, scale, origin: (x, y) })
}

// ---------------------------------------------------------------------------
// Optimizer

/// One momentum step: `v = momentum v - lr (g + decay w)`, `w += v`.
pub fn sgd_update<R: Real>(w: &mut [R], v: &mut [R], g: &[R], lr: f64, momentum: f64, decay: f64) {
    let (lr, m, d) = (R::from_f64(lr), R::from_f64(momentum), R::from_f64(decay));
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = m * *vi - lr * (*gi + d * *wi);
        *wi += *vi;
    }
}

/// Applies tap multipliers and a momentum step; weight decay acts on weights
/// only, not biases.
pub fn apply_update<R: Real>(
    params: &mut ModelParams<R>,
    velocity: &mut ModelParams<R>,
    grads: &mut ModelParams<R>,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) {
    grads.scale_tap_columns(net_cfg);
    let n = params.tensors().len();
    let is_weight: Vec<bool> = params.tensors().iter().map(|t| t.name.ends_with("weight")).collect();
    let (p, v, g) = (params.tensors_mut(), velocity.tensors_mut(), grads.tensors());
    debug_assert_eq!(p.len(), n);
    for (((p, v), g), w) in p.into_iter().zip(v).zip(g).zip(is_weight) {
        let decay = if w { cfg.weight_decay } else { 0.0 };
        sgd_update(p, v, g.data, cfg.lr, cfg.momentum, decay);
    }
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
    pub val_ap: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,step,cls_loss,reg_loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.cls_loss, r.reg_loss, r.lr);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub net: FeatureNet<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were selected.
    pub best_epoch: usize,
}

/// Where and how training reports progress.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Writes `epoch_NNN.ckpt` after every epoch when set.
    pub checkpoint_dir: Option<PathBuf>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct StepResult {
    grads: ModelParams<f32>,
    objective: f64,
    mean_cls: f64,
    mean_reg: f64,
}

fn image_step(
    net: &FeatureNet<f32>,
    bank: &TemplateBank,
    img: &TrainImage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let m = net.config.mean_rgb;
    let fill = [m[0] as f32, m[1] as f32, m[2] as f32];
    let s = sample_input(img, cfg, fill, rng)?;
    let (heat, cache) = net.forward_cached(&s.input)?;
    let labels = assign_labels(&s.gt, bank, (heat.grid_w, heat.grid_h), s.scale, &s.valid, cfg.pos_iou, cfg.neg_iou);
    let loss = image_loss(&heat, &labels, cfg, rng);
    let grads = net.backward(&cache, &loss.grad)?;
    Ok(StepResult { grads, objective: loss.objective, mean_cls: loss.mean_cls, mean_reg: loss.mean_reg })
}

/// Validation AP of a model at IoU 0.5.
pub fn validation_ap(net: &FeatureNet<f32>, bank: &TemplateBank, images: &[TrainImage], threshold: f64) -> Result<f64> {
    let cfg = DetectConfig { score_threshold: threshold, ..DetectConfig::default() };
    let mut dets = Vec::with_capacity(images.len());
    for img in images {
        dets.push(detect(net, bank, &img.image, &cfg)?.into_iter().map(|d| d.bbox).collect());
    }
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|i| i.boxes.iter().map(|b| GroundTruth::new(*b)).collect()).collect();
    Ok(ap(&dets, &gts, 0.5).ap)
}

/// Trains from a seeded initialisation. With a validation set, the epoch with
/// the best validation AP is returned (earliest on ties); otherwise the last.
pub fn train(
    data: &[TrainImage],
    validation: &[TrainImage],
    bank: &TemplateBank,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if bank.is_empty() {
        return Err(Error::Config("template bank is empty".into()));
    }
    let mut net = FeatureNet::<f32>::new(net_cfg.clone(), bank.len())?;
    let mut velocity = net.params.zeros_like();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut step = 0usize;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<StepResult> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, i as u64));
                    image_step(&net, bank, &data[i], cfg, &mut rng)
                })
                .collect::<Result<_>>()?;
            let mut grads = net.params.zeros_like();
            for r in &results {
                if !r.objective.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch_no + 1,
                        message: format!("non-finite loss {}", r.objective),
                    });
                }
                grads.add_assign(&r.grads);
                cls_sum += r.mean_cls;
                reg_sum += r.mean_reg;
            }
            // per-image losses are averaged over the batch
            grads.scale(1.0 / results.len() as f32);
            apply_update(&mut net.params, &mut velocity, &mut grads, net_cfg, cfg);
            net.params.check_finite().map_err(|e| Error::Divergence {
                epoch,
                batch: batch_no + 1,
                message: e.to_string(),
            })?;
            step += 1;
        }
        let n = data.len() as f64;
        let mut row = EpochMetrics { epoch, step, cls_loss: cls_sum / n, reg_loss: reg_sum / n, lr: cfg.lr, val_ap: None };
        if !validation.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs) {
            let v = validation_ap(&net, bank, validation, cfg.val_threshold)?;
            row.val_ap = Some(v);
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, epoch, net.params.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: cls {:.5} reg {:.5}{}",
            row.cls_loss,
            row.reg_loss,
            row.val_ap.map(|v| format!(" val AP {v:.4}")).unwrap_or_default()
        );
        metrics.push(row);
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&net, dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            net.params = params;
            e
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome { net, metrics, best_epoch })
}
