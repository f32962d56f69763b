//! Pyramid inference: forward every level, decode active channels, apply box
//! regression, merge and suppress.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bank::{TemplateBank, PYRAMID_SCALES};
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox};
use crate::net::{grid_to_window, FeatureNet, HeatmapStack, GRID_STRIDE};
use crate::pyramid::{resample, scaled_dim, Raster};
use crate::tensor::Real;
use crate::training::apply_box_regression;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Regressed box in original image coordinates; `bbox.score == score`.
    pub bbox: BBox,
    pub score: f64,
    pub channel: usize,
    /// Pyramid scale the detection came from.
    pub scale: f64,
    pub gx: usize,
    pub gy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub scales: Vec<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { score_threshold: 0.5, nms_threshold: 0.3, scales: PYRAMID_SCALES.to_vec() }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Every cell of every channel active at `scale` whose score reaches `threshold`.
pub fn decode_level(heat: &HeatmapStack, bank: &TemplateBank, scale: f64, threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in bank.active_channels(scale) {
        let t = &bank.templates[c];
        for gy in 0..heat.grid_h {
            for gx in 0..heat.grid_w {
                let score = sigmoid(heat.logit(c, gx, gy));
                if score < threshold {
                    continue;
                }
                let anchor = grid_to_window(gx, gy, t, scale);
                let mut bbox = apply_box_regression(&anchor, heat.reg(c, gx, gy));
                bbox.score = score;
                out.push(Detection { bbox, score, channel: c, scale, gx, gy });
            }
        }
    }
    out
}

/// Stable order: score descending, then channel, then cell index, then scale.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.channel.cmp(&b.channel))
        .then((a.gy, a.gx).cmp(&(b.gy, b.gx)))
        .then(a.scale.total_cmp(&b.scale))
}

fn check_inputs<R: Real>(net: &FeatureNet<R>, bank: &TemplateBank, cfg: &DetectConfig) -> Result<()> {
    if !(cfg.score_threshold > 0.0 && cfg.score_threshold < 1.0) {
        return Err(Error::Config(format!("score threshold {} outside (0, 1)", cfg.score_threshold)));
    }
    if net.templates() != bank.len() {
        return Err(Error::Data(format!(
            "model has {} template channels, bank has {}",
            net.templates(),
            bank.len()
        )));
    }
    Ok(())
}

fn level_inputs(img: &Raster, scales: &[f64]) -> Vec<f64> {
    scales
        .iter()
        .copied()
        .filter(|&s| scaled_dim(img.width(), s) >= GRID_STRIDE && scaled_dim(img.height(), s) >= GRID_STRIDE)
        .collect()
}

/// Detections of one image after global NMS, best first.
pub fn detect<R: Real>(net: &FeatureNet<R>, bank: &TemplateBank, img: &Raster, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    Ok(detect_with_features(net, bank, img, cfg, false)?.into_iter().map(|(d, _)| d).collect())
}

/// Like [`detect`], optionally returning the foveal descriptor at each
/// detection's cell.
pub fn detect_with_features<R: Real>(
    net: &FeatureNet<R>,
    bank: &TemplateBank,
    img: &Raster,
    cfg: &DetectConfig,
    with_features: bool,
) -> Result<Vec<(Detection, Vec<f64>)>> {
    check_inputs(net, bank, cfg)?;
    if img.width() < GRID_STRIDE || img.height() < GRID_STRIDE {
        log::warn!("image {}x{} is smaller than {GRID_STRIDE}px; no detections", img.width(), img.height());
        return Ok(Vec::new());
    }
    let scales: Vec<f64> =
        level_inputs(img, &cfg.scales).into_iter().filter(|&s| !bank.active_channels(s).is_empty()).collect();
    let levels: Vec<Vec<(Detection, Vec<f64>)>> = scales
        .par_iter()
        .map(|&s| -> Result<_> {
            let level = resample(img, s)?;
            let (heat, cache) = net.forward_cached(&level)?;
            let dets = decode_level(&heat, bank, s, cfg.score_threshold);
            Ok(dets
                .into_iter()
                .map(|d| {
                    let f = if with_features { cache.feature_at(d.gx, d.gy) } else { Vec::new() };
                    (d, f)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<(Detection, Vec<f64>)> = levels.into_iter().flatten().collect();
    all.sort_by(|a, b| detection_order(&a.0, &b.0));
    let boxes: Vec<BBox> = all.iter().map(|(d, _)| d.bbox).collect();
    let keep = nms_indices(&boxes, cfg.nms_threshold);
    let mut taken: Vec<Option<(Detection, Vec<f64>)>> = all.into_iter().map(Some).collect();
    Ok(keep.into_iter().filter_map(|i| taken[i].take()).collect())
}

/// Decodes and merges precomputed heatmaps (one per scale) without NMS.
pub fn decode_all(levels: &[(f64, HeatmapStack)], bank: &TemplateBank, threshold: f64) -> Vec<Detection> {
    let mut all: Vec<Detection> =
        levels.iter().flat_map(|(s, h)| decode_level(h, bank, *s, threshold)).collect();
    all.sort_by(detection_order);
    all
}

// ---------------------------------------------------------------------------
// Feature export

/// A detection together with the descriptor at its cell, exported for offline
/// ellipse fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    /// Image path as listed in the dataset manifest.
    pub image: String,
    pub bbox: BBox,
    pub features: Vec<f32>,
}

const FEATURES_MAGIC: &[u8; 8] = b"TFFEATS1";

/// `TFFEATS1`, u32 dimension, u32 count, then per record: u32 name length,
/// name bytes, five f64 (x, y, w, h, score) and `dim` f32, all little-endian.
pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut out = FEATURES_MAGIC.to_vec();
    out.extend((dim as u32).to_le_bytes());
    out.extend((records.len() as u32).to_le_bytes());
    for r in records {
        if r.features.len() != dim {
            return Err(Error::Shape(format!("feature record for {} has dimension {}, expected {dim}", r.image, r.features.len())));
        }
        out.extend((r.image.len() as u32).to_le_bytes());
        out.extend(r.image.as_bytes());
        for v in [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.bbox.score] {
            out.extend(v.to_le_bytes());
        }
        for v in &r.features {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], source: &str) -> Result<Vec<FeatureRecord>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Data(format!("{source}: feature file truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != FEATURES_MAGIC {
        return Err(Error::Data(format!("{source}: not a feature file")));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let dim = u32_at(take(4)?);
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let image = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::Data(format!("{source}: image name is not UTF-8")))?;
        let mut v = [0.0f64; 5];
        for x in &mut v {
            *x = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let bbox = BBox::with_score(v[0], v[1], v[2], v[3], v[4])?;
        let features = take(4 * dim)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(FeatureRecord { image, bbox, features });
    }
    Ok(out)
}

pub fn write_features(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

/// Detection file line: `x y w h score`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format!("{} {} {} {} {}\n", d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BankMode, Template, TemplateSet};

    #[test]
    fn feature_file_round_trip() {
        let recs = vec![
            FeatureRecord { image: "a/b.ppm".into(), bbox: BBox::with_score(1.0, 2.0, 3.0, 4.0, 0.9).unwrap(), features: vec![0.5, -1.0] },
            FeatureRecord { image: "c.ppm".into(), bbox: BBox::with_score(0.0, 0.0, 8.0, 9.5, 0.25).unwrap(), features: vec![2.0, 3.0] },
        ];
        let bytes = encode_features(&recs).unwrap();
        assert_eq!(decode_features(&bytes, "t").unwrap(), recs);
        assert!(decode_features(&bytes[..bytes.len() - 1], "t").is_err());
        let mut bad = recs.clone();
        bad[1].features.push(1.0);
        assert!(encode_features(&bad).is_err());
    }

    fn bank() -> TemplateBank {
        TemplateBank {
            templates: vec![
                Template::new(40.0, 32.0, 1.0, TemplateSet::A, 0),
                Template::new(12.0, 10.0, 2.0, TemplateSet::B, 1),
            ],
            mode: BankMode::Pruned,
            dropped: vec![],
        }
    }

    fn heat(gw: usize, gh: usize, t: usize) -> HeatmapStack {
        HeatmapStack {
            grid_w: gw,
            grid_h: gh,
            templates: t,
            logits: vec![-10.0; t * gw * gh],
            regression: vec![0.0; 4 * t * gw * gh],
        }
    }

    #[test]
    fn nothing_over_threshold() {
        assert!(decode_level(&heat(4, 3, 2), &bank(), 1.0, 0.5).is_empty());
    }

    #[test]
    fn one_hot_cell() {
        let mut h = heat(4, 3, 2);
        h.logits[2 * 4 + 1] = 3.0;
        let d = decode_level(&h, &bank(), 1.0, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].gx, d[0].gy, d[0].channel), (1, 2, 0));
        let w = grid_to_window(1, 2, &bank().templates[0], 1.0);
        assert!((d[0].bbox.x - w.x).abs() < 1e-12 && (d[0].bbox.h - w.h).abs() < 1e-12);
        assert!((d[0].score - sigmoid(3.0)).abs() < 1e-15);
    }

    #[test]
    fn b_channel_is_silent_below_2x() {
        let mut h = heat(2, 2, 2);
        for v in &mut h.logits {
            *v = 5.0;
        }
        for s in [0.5, 1.0] {
            assert!(decode_level(&h, &bank(), s, 0.5).iter().all(|d| d.channel == 0));
        }
        assert_eq!(decode_level(&h, &bank(), 2.0, 0.5).len(), 8);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }
}
