//! Detector evaluation: greedy matching, precision/recall, average precision,
//! overlap-weighted scoring for ellipse ground truth, false-positive
//! diagnosis and normalized-AP sensitivity.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Ellipse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Ignored objects neither count as misses nor turn their matches into
    /// false positives.
    pub ignore: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        GroundTruth { bbox, ignore: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStatus {
    TruePositive,
    FalsePositive,
    /// Matched an ignored ground truth, or filtered out by a size range.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub image: usize,
    pub detection: usize,
    pub score: f64,
    pub gt: Option<usize>,
    /// IoU with the matched ground truth, else the best IoU with any.
    pub iou: f64,
    pub status: MatchStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    pub num_gt: usize,
    pub num_dets: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    /// In global processing order (score descending).
    pub matches: Vec<MatchRecord>,
    pub missed: Vec<(usize, usize)>,
}

/// Global processing order: score descending, ties by image then index.
fn detection_order(dets: &[Vec<BBox>]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    order
}

/// Greedy one-to-one matching. Each detection takes the highest-IoU unmatched
/// ground truth at or above `threshold`, preferring scored over ignored ones.
pub fn match_detections(dets: &[Vec<BBox>], gts: &[Vec<GroundTruth>], threshold: f64) -> (Vec<MatchRecord>, Vec<Vec<bool>>) {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover different image counts");
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut records = Vec::new();
    for (img, j) in detection_order(dets) {
        let d = &dets[img][j];
        let mut best_any = 0.0f64;
        let mut best: Option<(bool, f64, usize)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            let o = iou(d, &g.bbox);
            best_any = best_any.max(o);
            if taken[img][k] || o < threshold {
                continue;
            }
            let cand = (!g.ignore, o, k);
            let better = match best {
                None => true,
                Some((scored, bo, _)) => (cand.0 && !scored) || (cand.0 == scored && o > bo),
            };
            if better {
                best = Some(cand);
            }
        }
        let rec = match best {
            Some((scored, o, k)) => {
                taken[img][k] = true;
                let status = if scored { MatchStatus::TruePositive } else { MatchStatus::Ignored };
                MatchRecord { image: img, detection: j, score: d.score, gt: Some(k), iou: o, status }
            }
            None => MatchRecord {
                image: img,
                detection: j,
                score: d.score,
                gt: None,
                iou: best_any,
                status: MatchStatus::FalsePositive,
            },
        };
        records.push(rec);
    }
    (records, taken)
}

/// Area under the precision envelope (all-points interpolation).
pub fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for i in (0..curve.len()).rev() {
        running = running.max(curve[i].precision);
        envelope[i] = running;
    }
    for (p, env) in curve.iter().zip(envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

fn report_from(records: Vec<MatchRecord>, taken: &[Vec<bool>], gts: &[Vec<GroundTruth>]) -> EvalReport {
    let num_gt = gts.iter().flatten().filter(|g| !g.ignore).count();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::new();
    for r in &records {
        match r.status {
            MatchStatus::TruePositive => tp += 1,
            MatchStatus::FalsePositive => fp += 1,
            MatchStatus::Ignored => continue,
        }
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        curve.push(PrPoint { score: r.score, recall, precision: tp as f64 / (tp + fp) as f64 });
    }
    let missed = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().enumerate().filter(move |(k, gt)| !gt.ignore && !taken[i][*k]).map(move |(k, _)| (i, k)))
        .collect();
    EvalReport {
        ap: interpolated_ap(&curve),
        curve,
        num_gt,
        num_dets: records.len(),
        true_positives: tp,
        false_positives: fp,
        matches: records,
        missed,
    }
}

/// Average precision at an IoU threshold.
pub fn ap(dets: &[Vec<BBox>], gts: &[Vec<GroundTruth>], iou_threshold: f64) -> EvalReport {
    let (records, taken) = match_detections(dets, gts, iou_threshold);
    report_from(records, &taken, gts)
}

/// AP restricted to objects whose height lies in `[min_h, max_h)`. Other
/// ground truths are ignored, and unmatched detections outside the range are
/// dropped rather than counted as false positives.
pub fn ap_in_height_range(
    dets: &[Vec<BBox>],
    gts: &[Vec<GroundTruth>],
    iou_threshold: f64,
    min_h: f64,
    max_h: f64,
) -> EvalReport {
    let inside = |h: f64| h >= min_h && h < max_h;
    let gts: Vec<Vec<GroundTruth>> = gts
        .iter()
        .map(|g| g.iter().map(|gt| GroundTruth { bbox: gt.bbox, ignore: gt.ignore || !inside(gt.bbox.h) }).collect())
        .collect();
    let (mut records, taken) = match_detections(dets, &gts, iou_threshold);
    for r in &mut records {
        if r.status == MatchStatus::FalsePositive && !inside(dets[r.image][r.detection].h) {
            r.status = MatchStatus::Ignored;
        }
    }
    report_from(records, &taken, &gts)
}

// ---------------------------------------------------------------------------
// Region overlap

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Box(BBox),
    Ellipse(Ellipse),
}

impl Region {
    pub fn bounds(&self) -> BBox {
        match self {
            Region::Box(b) => *b,
            Region::Ellipse(e) => e.bounding_box(),
        }
    }

    pub fn score(&self) -> f64 {
        match self {
            Region::Box(b) => b.score,
            Region::Ellipse(e) => e.score,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Box(b) => x >= b.x && x < b.right() && y >= b.y && y < b.bottom(),
            Region::Ellipse(e) => e.contains(x, y),
        }
    }
}

/// Samples per pixel along each axis when rasterizing regions.
pub const RASTER_SUPERSAMPLING: usize = 4;

/// IoU of two regions rasterized on the pixel grid with 4x4 samples per pixel.
pub fn region_iou(a: &Region, b: &Region) -> f64 {
    let (ba, bb) = (a.bounds(), b.bounds());
    if ba.intersection_area(&bb) <= 0.0 {
        return 0.0;
    }
    let x0 = ba.x.min(bb.x).floor();
    let y0 = ba.y.min(bb.y).floor();
    let x1 = ba.right().max(bb.right()).ceil();
    let y1 = ba.bottom().max(bb.bottom()).ceil();
    let step = 1.0 / RASTER_SUPERSAMPLING as f64;
    let nx = ((x1 - x0) / step).round() as usize;
    let ny = ((y1 - y0) / step).round() as usize;
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * step;
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Cumulative true-positive credit against false-positive count, one point per
/// detection in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapCurve {
    pub num_gt: usize,
    /// `(false positives, credit / num_gt, score)`
    pub points: Vec<(usize, f64, f64)>,
    /// Per matched detection: its overlap credit.
    pub credits: Vec<f64>,
}

impl OverlapCurve {
    pub fn final_rate(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    /// Detection rate at the last point with at most `max_fp` false positives.
    pub fn rate_at(&self, max_fp: usize) -> f64 {
        self.points.iter().rev().find(|p| p.0 <= max_fp).map_or(0.0, |p| p.1)
    }
}

/// FDDB-style scoring. Matching is greedy by score at IoU 0.5; a match earns
/// its overlap when `continuous`, else 1.
pub fn fddb_curve(dets: &[Vec<Region>], gts: &[Vec<Ellipse>], continuous: bool) -> OverlapCurve {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover different image counts");
    let num_gt = gts.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| dets[b.0][b.1].score().total_cmp(&dets[a.0][a.1].score()).then(a.cmp(b)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut credit, mut fp) = (0.0, 0usize);
    let mut points = Vec::with_capacity(order.len());
    let mut credits = Vec::new();
    for (img, j) in order {
        let d = &dets[img][j];
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            if taken[img][k] {
                continue;
            }
            let o = region_iou(d, &Region::Ellipse(*g));
            if o >= 0.5 && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, k));
            }
        }
        match best {
            Some((o, k)) => {
                taken[img][k] = true;
                let c = if continuous { o } else { 1.0 };
                credit += c;
                credits.push(c);
            }
            None => fp += 1,
        }
        let rate = if num_gt == 0 { 0.0 } else { credit / num_gt as f64 };
        points.push((fp, rate, d.score()));
    }
    OverlapCurve { num_gt, points, credits }
}

// ---------------------------------------------------------------------------
// Diagnosis

/// False positives overlapping some ground truth by more than this are
/// localization errors; the rest are background confusion.
pub const LOCALIZATION_MIN_IOU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    Background,
    Localization,
}

impl ErrorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMode::Background => "bg",
            ErrorMode::Localization => "loc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalsePositive {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
    /// Max IoU with any ground truth of the image.
    pub ov: f64,
    /// Fraction of all detections scored strictly below this one.
    pub one_minus_r: f64,
    pub mode: ErrorMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisReport {
    pub background: usize,
    pub localization: usize,
    pub top: Vec<FalsePositive>,
}

impl DiagnosisReport {
    pub fn total(&self) -> usize {
        self.background + self.localization
    }
}

pub fn classify_false_positive(max_iou: f64) -> ErrorMode {
    if max_iou > LOCALIZATION_MIN_IOU {
        ErrorMode::Localization
    } else {
        ErrorMode::Background
    }
}

/// Classifies every false positive and lists the `k` highest scoring.
pub fn diagnose(dets: &[Vec<BBox>], gts: &[Vec<GroundTruth>], iou_threshold: f64, k: usize) -> DiagnosisReport {
    let (records, _) = match_detections(dets, gts, iou_threshold);
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let mut report = DiagnosisReport { background: 0, localization: 0, top: Vec::new() };
    for r in records.iter().filter(|r| r.status == MatchStatus::FalsePositive) {
        let mode = classify_false_positive(r.iou);
        match mode {
            ErrorMode::Background => report.background += 1,
            ErrorMode::Localization => report.localization += 1,
        }
        if report.top.len() < k {
            let below = scores.partition_point(|&s| s < r.score);
            report.top.push(FalsePositive {
                image: r.image,
                bbox: dets[r.image][r.detection],
                score: r.score,
                ov: r.iou,
                one_minus_r: below as f64 / n as f64,
                mode,
            });
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Sensitivity

/// A partition of the ground truth into named bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristic {
    pub name: String,
    pub labels: Vec<String>,
    /// Bin of every ground truth, per image.
    pub bin_of: Vec<Vec<usize>>,
}

impl Characteristic {
    /// Bins objects by height with ascending `edges` (`len + 1` bins).
    pub fn height(gts: &[Vec<GroundTruth>], edges: &[f64]) -> Self {
        Self::by_value("height", gts, edges, |b| b.h)
    }

    /// Bins objects by aspect ratio w/h.
    pub fn aspect(gts: &[Vec<GroundTruth>], edges: &[f64]) -> Self {
        Self::by_value("aspect", gts, edges, |b| b.w / b.h)
    }

    pub fn by_value(name: &str, gts: &[Vec<GroundTruth>], edges: &[f64], f: impl Fn(&BBox) -> f64) -> Self {
        let mut labels = Vec::new();
        for i in 0..=edges.len() {
            labels.push(match i {
                0 => format!("<{}", edges.first().map_or(f64::INFINITY, |e| *e)),
                _ if i == edges.len() => format!(">={}", edges[i - 1]),
                _ => format!("[{},{})", edges[i - 1], edges[i]),
            });
        }
        let bin_of = gts
            .iter()
            .map(|g| g.iter().map(|gt| edges.partition_point(|&e| e <= f(&gt.bbox))).collect())
            .collect();
        Characteristic { name: name.into(), labels, bin_of }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub label: String,
    pub num_gt: usize,
    pub normalized_ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub name: String,
    pub bins: Vec<BinReport>,
    /// Labels of bins without ground truth.
    pub omitted: Vec<String>,
    pub min: f64,
    pub max: f64,
}

/// Normalized AP: precision recomputed as if every bin held `n` objects,
/// `P = R n / (R n + FP)`.
pub fn normalized_ap(records: &[MatchRecord], num_gt: usize, n: f64) -> f64 {
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in records {
        match r.status {
            MatchStatus::TruePositive => tp += 1,
            MatchStatus::FalsePositive => fp += 1,
            MatchStatus::Ignored => continue,
        }
        let recall = tp as f64 / num_gt as f64;
        let rn = recall * n;
        let precision = if rn + fp as f64 > 0.0 { rn / (rn + fp as f64) } else { 0.0 };
        curve.push(PrPoint { score: r.score, recall, precision });
    }
    interpolated_ap(&curve)
}

/// Normalized AP per bin. `n` defaults to the mean number of objects per
/// non-empty bin.
pub fn sensitivity(
    dets: &[Vec<BBox>],
    gts: &[Vec<GroundTruth>],
    characteristic: &Characteristic,
    iou_threshold: f64,
    n: Option<f64>,
) -> SensitivityReport {
    let nbins = characteristic.labels.len();
    let mut counts = vec![0usize; nbins];
    for (g, bins) in gts.iter().zip(&characteristic.bin_of) {
        for (gt, &b) in g.iter().zip(bins) {
            if !gt.ignore {
                counts[b] += 1;
            }
        }
    }
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    let total: usize = counts.iter().sum();
    let n = n.unwrap_or(if nonempty == 0 { 0.0 } else { total as f64 / nonempty as f64 });
    let mut bins = Vec::new();
    let mut omitted = Vec::new();
    for b in 0..nbins {
        if counts[b] == 0 {
            omitted.push(characteristic.labels[b].clone());
            continue;
        }
        let masked: Vec<Vec<GroundTruth>> = gts
            .iter()
            .zip(&characteristic.bin_of)
            .map(|(g, bin)| {
                g.iter().zip(bin).map(|(gt, &k)| GroundTruth { bbox: gt.bbox, ignore: gt.ignore || k != b }).collect()
            })
            .collect();
        let (records, _) = match_detections(dets, &masked, iou_threshold);
        bins.push(BinReport {
            label: characteristic.labels[b].clone(),
            num_gt: counts[b],
            normalized_ap: normalized_ap(&records, counts[b], n),
        });
    }
    let min = bins.iter().map(|b| b.normalized_ap).fold(f64::INFINITY, f64::min);
    let max = bins.iter().map(|b| b.normalized_ap).fold(f64::NEG_INFINITY, f64::max);
    SensitivityReport { name: characteristic.name.clone(), bins, omitted, min, max }
}

// ---------------------------------------------------------------------------
// Output

pub fn pr_curve_csv(report: &EvalReport) -> String {
    let mut s = String::from("score,recall,precision\n");
    for p in &report.curve {
        let _ = writeln!(s, "{},{},{}", p.score, p.recall, p.precision);
    }
    s
}

/// Precision/recall plot with both axes spanning [0, 1].
pub fn pr_curve_svg(report: &EvalReport, title: &str) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let px = |r: f64| m + r * (w - 2.0 * m);
    let py = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{} (AP {:.4})</text>"#, w / 2.0, xml_escape(title), report.ap);
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/>"##, px(v), py(0.0), px(v), py(1.0));
        let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/>"##, px(0.0), py(v), px(1.0), py(v));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{v:.1}</text>"#, px(v), py(0.0) + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{v:.1}</text>"#, px(0.0) - 4.0, py(v) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">recall</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">precision</text>"#, h / 2.0, h / 2.0);
    let pts: Vec<String> = report.curve.iter().map(|p| format!("{:.3},{:.3}", px(p.recall), py(p.precision))).collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#c0392b" stroke-width="2" points="{}"/>"##, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------------------
// Detection files

/// Parses a detection file: `x y w h score` lines are boxes and
/// `ra rb theta cx cy score` lines are ellipses.
pub fn parse_detections(text: &str, source: &str) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(source, i + 1, format!("non-numeric field in {line:?}")))?;
        let geom = |e: Error| Error::parse(source, i + 1, e.to_string());
        let r = match v.len() {
            5 => Region::Box(BBox::with_score(v[0], v[1], v[2], v[3], v[4]).map_err(geom)?),
            6 => {
                let mut e = Ellipse::new(v[3], v[4], v[0], v[1], v[2]).map_err(geom)?;
                e.score = v[5];
                Region::Ellipse(e)
            }
            n => return Err(Error::parse(source, i + 1, format!("expected 5 or 6 fields, got {n}"))),
        };
        out.push(r);
    }
    Ok(out)
}

/// Per-image detection file inside `dir`: the image path with its extension
/// replaced by `.txt`.
pub fn detection_path(dir: &Path, image: &str) -> PathBuf {
    dir.join(Path::new(image).with_extension("txt"))
}

/// Reads the detection file of every image; a missing file means no detections.
pub fn read_detection_dir(dir: &Path, images: &[String]) -> Result<Vec<Vec<Region>>> {
    images
        .iter()
        .map(|img| {
            let p = detection_path(dir, img);
            match fs::read_to_string(&p) {
                Ok(text) => parse_detections(&text, &p.display().to_string()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
                Err(e) => Err(Error::io(&p, e)),
            }
        })
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64, s: f64) -> BBox {
        BBox::with_score(x, y, w, h, s).unwrap()
    }

    fn gt(x: f64, y: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth::new(b(x, y, w, h, 0.0))
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 0.0, 10.0, 10.0)]];
        let dets = vec![gts[0].iter().map(|g| BBox { score: 1.0, ..g.bbox }).collect()];
        assert_eq!(ap(&dets, &gts, 0.5).ap, 1.0);
        assert_eq!(ap(&[vec![]], &gts, 0.5).ap, 0.0);
    }

    #[test]
    fn ignored_matches_drop_out() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), GroundTruth { ignore: true, ..gt(50.0, 0.0, 10.0, 10.0) }]];
        let dets = vec![vec![b(50.0, 0.0, 10.0, 10.0, 0.9), b(0.0, 0.0, 10.0, 10.0, 0.8)]];
        let r = ap(&dets, &gts, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.matches[0].status, MatchStatus::Ignored);
    }

    #[test]
    fn ellipse_vs_its_box() {
        let e = Ellipse::new(50.0, 50.0, 40.0, 20.0, std::f64::consts::FRAC_PI_2).unwrap();
        let o = region_iou(&Region::Ellipse(e), &Region::Box(e.bounding_box()));
        assert!((o - std::f64::consts::FRAC_PI_4).abs() < 2e-3, "{o}");
        assert!((region_iou(&Region::Ellipse(e), &Region::Ellipse(e)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn error_modes() {
        assert_eq!(classify_false_positive(0.4), ErrorMode::Localization);
        assert_eq!(classify_false_positive(0.1), ErrorMode::Background);
        assert_eq!(classify_false_positive(0.0), ErrorMode::Background);
    }

    #[test]
    fn one_minus_r_of_the_top_detection() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![b(100.0, 100.0, 10.0, 10.0, 0.9), b(0.0, 0.0, 10.0, 10.0, 0.5), b(200.0, 0.0, 5.0, 5.0, 0.1)]];
        let d = diagnose(&dets, &gts, 0.5, 20);
        assert_eq!(d.total(), 2);
        assert_eq!(d.top[0].one_minus_r, 2.0 / 3.0);
        assert_eq!(d.top[1].one_minus_r, 0.0);
    }

    #[test]
    fn detection_lines() {
        let r = parse_detections("1 2 3 4 0.5\n\n10 5 1.5707963267948966 20 30 0.8\n", "t").unwrap();
        assert_eq!(r[0], Region::Box(b(1.0, 2.0, 3.0, 4.0, 0.5)));
        match r[1] {
            Region::Ellipse(e) => assert_eq!((e.cx, e.cy, e.score), (20.0, 30.0, 0.8)),
            _ => panic!(),
        }
        assert!(parse_detections("1 2 3\n", "t").is_err());
        assert!(parse_detections("1 2 x 4 0.5\n", "t").is_err());
    }

    #[test]
    fn svg_has_axes() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![b(0.0, 0.0, 10.0, 10.0, 0.9)]];
        let svg = pr_curve_svg(&ap(&dets, &gts, 0.5), "x<y");
        assert!(svg.starts_with("<svg") && svg.contains("x&lt;y") && svg.contains(">1.0<"));
    }
}
