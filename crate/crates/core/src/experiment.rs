//! Seeded end-to-end runs: render or load splits, build the bank from the
//! training shapes, train, detect on the test split and score per height band.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::bank::{build_bank, TemplateBank};
use crate::clustering::{cluster_shapes, ShapeClusterConfig};
use crate::dataset::{render_synthetic, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::eval::{ap, ap_in_height_range, GroundTruth};
use crate::geometry::BBox;
use crate::inference::{detect, DetectConfig};
use crate::net::{FeatureNet, NetConfig, TapKind};
use crate::training::{train, EpochMetrics, TrainConfig, TrainImage, TrainOptions};

/// Height bands reported by every run, in pixels.
pub const HEIGHT_BANDS: [(f64, f64); 4] = [(0.0, 20.0), (20.0, 40.0), (40.0, 140.0), (140.0, f64::INFINITY)];

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<TrainImage>,
    pub validation: Vec<TrainImage>,
    pub test: Vec<TrainImage>,
}

/// Renders `n` synthetic images with `spec`.
pub fn render_split(spec: &SyntheticSpec, n: usize) -> Result<Vec<TrainImage>> {
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| render_synthetic(spec, i).map(|s| TrainImage { image: s.raster, boxes: s.boxes }))
        .collect()
}

/// Train, validation and test splits rendered with seeds `seed`, `seed + 1`
/// and `seed + 2`.
pub fn synthetic_splits(spec: &SyntheticSpec, train: usize, validation: usize, test: usize) -> Result<Splits> {
    let with_seed = |k: u64| SyntheticSpec { seed: spec.seed.wrapping_add(k), ..spec.clone() };
    Ok(Splits {
        train: render_split(&with_seed(0), train)?,
        validation: render_split(&with_seed(1), validation)?,
        test: render_split(&with_seed(2), test)?,
    })
}

/// Every image of a dataset with all of its boxes.
pub fn load_images(data: &Dataset) -> Result<Vec<TrainImage>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            Ok(TrainImage { image: data.load_image(i)?, boxes: data.manifest.images[i].bboxes() })
        })
        .collect()
}

/// Pixel-weighted mean colour of a set of images.
pub fn mean_rgb(images: &[TrainImage]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for t in images {
        let px = t.image.width() * t.image.height();
        let m = t.image.mean_rgb();
        for c in 0..3 {
            sum[c] += m[c] * px as f64;
        }
        n += px;
    }
    sum.map(|s| if n > 0 { s / n as f64 } else { 0.0 })
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub cluster: ShapeClusterConfig,
    pub prune: bool,
    /// Base network; its mean colour is replaced by the training split's.
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Score threshold used when collecting test detections.
    pub eval_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cluster: ShapeClusterConfig::default(),
            prune: true,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval_threshold: 0.05,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandAp {
    pub min_h: f64,
    pub max_h: f64,
    pub num_gt: usize,
    pub ap: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub ap: f64,
    pub bands: Vec<BandAp>,
    pub templates: usize,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub train_seconds: f64,
    pub detect_seconds: f64,
}

impl ExperimentReport {
    /// AP of the band starting at `min_h`.
    pub fn band(&self, min_h: f64) -> Option<&BandAp> {
        self.bands.iter().find(|b| b.min_h == min_h)
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub bank: TemplateBank,
    pub net: FeatureNet<f32>,
    pub report: ExperimentReport,
}

/// Bank built from the shapes of the training split.
pub fn bank_for(images: &[TrainImage], cluster: &ShapeClusterConfig, prune: bool) -> Result<TemplateBank> {
    let shapes: Vec<_> = images.iter().flat_map(|t| t.boxes.iter().map(BBox::shape)).collect();
    let canon = cluster_shapes(&shapes, cluster)?;
    build_bank(&canon, prune)
}

/// Test-split detections of a trained model, one list per image.
pub fn test_detections(net: &FeatureNet<f32>, bank: &TemplateBank, images: &[TrainImage], threshold: f64) -> Result<Vec<Vec<BBox>>> {
    let cfg = DetectConfig { score_threshold: threshold, ..DetectConfig::default() };
    images
        .iter()
        .map(|t| Ok(detect(net, bank, &t.image, &cfg)?.into_iter().map(|d| d.bbox).collect()))
        .collect()
}

/// AP overall and per height band.
pub fn score(dets: &[Vec<BBox>], images: &[TrainImage], iou_threshold: f64) -> (f64, Vec<BandAp>) {
    let gts: Vec<Vec<GroundTruth>> =
        images.iter().map(|t| t.boxes.iter().map(|b| GroundTruth::new(*b)).collect()).collect();
    let overall = ap(dets, &gts, iou_threshold).ap;
    let bands = HEIGHT_BANDS
        .iter()
        .map(|&(lo, hi)| {
            let r = ap_in_height_range(dets, &gts, iou_threshold, lo, hi);
            BandAp { min_h: lo, max_h: hi, num_gt: r.num_gt, ap: r.ap }
        })
        .collect();
    (overall, bands)
}

pub fn run_experiment(splits: &Splits, cfg: &ExperimentConfig) -> Result<Experiment> {
    let bank = bank_for(&splits.train, &cfg.cluster, cfg.prune)?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.mean_rgb = mean_rgb(&splits.train);
    let t0 = Instant::now();
    let out = train(&splits.train, &splits.validation, &bank, &net_cfg, &cfg.train, &TrainOptions::default())?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let dets = test_detections(&out.net, &bank, &splits.test, cfg.eval_threshold)?;
    let detect_seconds = t1.elapsed().as_secs_f64();
    let (ap, bands) = score(&dets, &splits.test, cfg.iou_threshold);
    let report = ExperimentReport {
        ap,
        bands,
        templates: bank.len(),
        best_epoch: out.best_epoch,
        metrics: out.metrics,
        train_seconds,
        detect_seconds,
    };
    Ok(Experiment { bank, net: out.net, report })
}

/// One configuration of an ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub fine_tap: bool,
    pub coarse_tap: bool,
    pub prune: bool,
}

impl Variant {
    pub fn baseline() -> Self {
        Variant { name: "baseline".into(), fine_tap: true, coarse_tap: true, prune: true }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.prune = self.prune;
        c.net.set_tap_enabled(TapKind::Fine, self.fine_tap);
        c.net.set_tap_enabled(TapKind::Coarse, self.coarse_tap);
        c
    }
}

/// Runs every variant on the same splits.
pub fn ablate(splits: &Splits, cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, ExperimentReport)>> {
    variants
        .iter()
        .map(|v| {
            log::info!("ablation variant {}", v.name);
            Ok((v.clone(), run_experiment(splits, &v.apply(cfg))?.report))
        })
        .collect()
}

/// One row per variant: overall AP, then AP per height band.
pub fn ablation_csv(rows: &[(Variant, ExperimentReport)]) -> String {
    let mut s = String::from("variant,fine_tap,coarse_tap,prune,templates,ap");
    for (lo, hi) in HEIGHT_BANDS {
        if hi.is_finite() {
            let _ = write!(s, ",ap_{lo}_{hi}");
        } else {
            let _ = write!(s, ",ap_{lo}_inf");
        }
    }
    s.push('\n');
    for (v, r) in rows {
        let _ = write!(s, "{},{},{},{},{},{}", v.name, v.fine_tap, v.coarse_tap, v.prune, r.templates, r.ap);
        for b in &r.bands {
            let _ = write!(s, ",{}", b.ap);
        }
        s.push('\n');
    }
    s
}
