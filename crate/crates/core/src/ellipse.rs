//! Offline linear regression from detection features to bounding-ellipse
//! parameters, relative to the detection box.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::AnnotatedImage;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Ellipse};
use crate::inference::FeatureRecord;

/// Regression targets of an ellipse relative to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseTargets {
    pub t_xc: f64,
    pub t_yc: f64,
    pub t_ra: f64,
    pub t_rb: f64,
    pub t_theta: f64,
}

impl EllipseTargets {
    pub fn to_array(&self) -> [f64; 5] {
        [self.t_xc, self.t_yc, self.t_ra, self.t_rb, self.t_theta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        EllipseTargets { t_xc: a[0], t_yc: a[1], t_ra: a[2], t_rb: a[3], t_theta: a[4] }
    }
}

/// Center offsets scaled by box size, log radii relative to the half box
/// height (major) and half width (minor), and the cotangent of the angle.
pub fn encode(b: &BBox, e: &Ellipse) -> Result<EllipseTargets> {
    if !b.is_valid() {
        return Err(Error::Geometry(format!("invalid box {b:?}")));
    }
    if !(e.ra > 0.0 && e.rb > 0.0) {
        return Err(Error::Geometry("ellipse radii must be positive".into()));
    }
    if !(e.theta > 0.0 && e.theta < std::f64::consts::PI) {
        return Err(Error::Geometry(format!("angle {} has no cotangent in (0, pi)", e.theta)));
    }
    Ok(EllipseTargets {
        t_xc: (e.cx - b.cx()) / b.w,
        t_yc: (e.cy - b.cy()) / b.h,
        t_ra: (e.ra / (b.h / 2.0)).ln(),
        t_rb: (e.rb / (b.w / 2.0)).ln(),
        t_theta: 1.0 / e.theta.tan(),
    })
}

/// Inverse of [`encode`]; the angle is the arccotangent on (0, pi).
pub fn decode(b: &BBox, t: &EllipseTargets) -> Ellipse {
    Ellipse {
        cx: b.cx() + t.t_xc * b.w,
        cy: b.cy() + t.t_yc * b.h,
        ra: b.h / 2.0 * t.t_ra.exp(),
        rb: b.w / 2.0 * t.t_rb.exp(),
        theta: FRAC_PI_2 - t.t_theta.atan(),
        score: b.score,
    }
}

/// Five affine predictors over a fixed-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseModel {
    /// Names the feature layout the weights expect.
    pub feature_id: String,
    pub dim: usize,
    /// Per target: `dim` weights then the bias.
    pub weights: [Vec<f64>; 5],
}

impl EllipseModel {
    pub fn predict_targets(&self, x: &[f64]) -> Result<EllipseTargets> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("feature has {} values, model expects {}", x.len(), self.dim)));
        }
        let f = |w: &Vec<f64>| w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[self.dim];
        Ok(EllipseTargets::from_array([0, 1, 2, 3, 4].map(|k| f(&self.weights[k]))))
    }

    pub fn predict(&self, b: &BBox, x: &[f64]) -> Result<Ellipse> {
        Ok(decode(b, &self.predict_targets(x)?))
    }

    /// Text header then little-endian `f64` weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("ELLIPSE-MODEL 1\nfeature={}\ndim={}\nend\n", self.feature_id, self.dim).into_bytes();
        for w in &self.weights {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("ellipse model: {m}"));
        let marker = b"\nend\n";
        let split = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("ELLIPSE-MODEL 1") {
            return Err(bad("unknown format"));
        }
        let (mut feature_id, mut dim) = (None, None);
        for l in lines {
            match l.split_once('=') {
                Some(("feature", v)) => feature_id = Some(v.to_string()),
                Some(("dim", v)) => dim = Some(v.parse::<usize>().map_err(|_| bad("bad dim"))?),
                _ => return Err(bad("bad header line")),
            }
        }
        let (feature_id, dim) = (feature_id.ok_or_else(|| bad("no feature"))?, dim.ok_or_else(|| bad("no dim"))?);
        let body = &bytes[split + marker.len()..];
        if body.len() != 5 * (dim + 1) * 8 {
            return Err(bad("weight block has the wrong length"));
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let weights = [0, 1, 2, 3, 4].map(|k| vals[k * (dim + 1)..(k + 1) * (dim + 1)].to_vec());
        Ok(EllipseModel { feature_id, dim, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const CV_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EllipseFit {
    pub model: EllipseModel,
    /// Root-mean-square training residual per target.
    pub train_rmse: [f64; 5],
    /// Cross-validated root-mean-square error per target.
    pub cv_rmse: [f64; 5],
    /// Per fold: training RMSE of the fit and of the bias-only model, summed over targets.
    pub fold_train_rmse: Vec<(f64, f64)>,
}

/// Ridge-regularized least squares (bias unregularized) per target.
pub fn fit_model(features: &[Vec<f64>], targets: &[EllipseTargets], lambda: f64, feature_id: &str) -> Result<EllipseModel> {
    let n = features.len();
    if n != targets.len() {
        return Err(Error::Shape("features and targets differ in length".into()));
    }
    let dim = features.first().map_or(0, Vec::len);
    if n < dim + 1 {
        return Err(Error::Data(format!("{n} samples cannot determine {} coefficients", dim + 1)));
    }
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) || targets.iter().any(|t| t.to_array().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite regression input".into()));
    }
    // center so the bias drops out of the regularized system
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j] - mean[j]);
    let mut gram = x.transpose() * &x;
    for j in 0..dim {
        gram[(j, j)] += lambda;
    }
    let chol = if dim > 0 {
        Some(gram.cholesky().ok_or_else(|| Error::Numerical("design matrix is rank deficient".into()))?)
    } else {
        None
    };
    let weights = [0, 1, 2, 3, 4].map(|k| {
        let y: Vec<f64> = targets.iter().map(|t| t.to_array()[k]).collect();
        let ymean = y.iter().sum::<f64>() / n as f64;
        let mut w = match &chol {
            Some(c) => {
                let rhs = x.transpose() * DVector::from_iterator(n, y.iter().map(|v| v - ymean));
                c.solve(&rhs).iter().copied().collect()
            }
            None => Vec::new(),
        };
        let bias = ymean - w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        w.push(bias);
        w
    });
    if weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("regression produced non-finite weights".into()));
    }
    Ok(EllipseModel { feature_id: feature_id.to_string(), dim, weights })
}

fn rmse(model: &EllipseModel, features: &[Vec<f64>], targets: &[EllipseTargets]) -> [f64; 5] {
    let mut se = [0.0; 5];
    for (f, t) in features.iter().zip(targets) {
        let p = model.predict_targets(f).expect("dimension checked").to_array();
        for k in 0..5 {
            se[k] += (p[k] - t.to_array()[k]).powi(2);
        }
    }
    se.map(|s| (s / features.len().max(1) as f64).sqrt())
}

/// Fits on all samples and reports `folds`-fold cross-validated error.
/// Fold `f` holds the samples with index `i % folds == f`.
pub fn fit(features: &[Vec<f64>], targets: &[EllipseTargets], lambda: f64, folds: usize, feature_id: &str) -> Result<EllipseFit> {
    let model = fit_model(features, targets, lambda, feature_id)?;
    let train_rmse = rmse(&model, features, targets);
    let folds = folds.clamp(1, features.len());
    let mut sq = [0.0; 5];
    let mut count = 0usize;
    let mut fold_train_rmse = Vec::new();
    for f in 0..folds {
        let (mut trf, mut trt, mut tef, mut tet) = (vec![], vec![], vec![], vec![]);
        for (i, (x, t)) in features.iter().zip(targets).enumerate() {
            if folds > 1 && i % folds == f {
                tef.push(x.clone());
                tet.push(*t);
            } else {
                trf.push(x.clone());
                trt.push(*t);
            }
        }
        let m = fit_model(&trf, &trt, lambda, feature_id)?;
        let zero = fit_model(&vec![Vec::new(); trf.len()], &trt, lambda, feature_id)?;
        let zero = EllipseModel { dim: m.dim, weights: zero.weights.map(|w| [vec![0.0; m.dim], w].concat()), ..zero };
        fold_train_rmse.push((rmse(&m, &trf, &trt).iter().sum(), rmse(&zero, &trf, &trt).iter().sum()));
        let (ef, et) = if folds > 1 { (&tef, &tet) } else { (&trf, &trt) };
        let r = rmse(&m, ef, et);
        for k in 0..5 {
            sq[k] += r[k] * r[k] * ef.len() as f64;
        }
        count += ef.len();
    }
    let cv_rmse = sq.map(|s| (s / count as f64).sqrt());
    Ok(EllipseFit { model, train_rmse, cv_rmse, fold_train_rmse })
}

/// Regression pairs built from exported detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingPairs {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<EllipseTargets>,
    /// Detections with no ground-truth ellipse overlapping enough.
    pub unmatched: usize,
    /// Matches whose ellipse angle is exactly 0, where the angle target is undefined.
    pub degenerate: usize,
}

fn image_key(path: &str) -> String {
    Path::new(path).with_extension("").to_string_lossy().replace('\\', "/")
}

/// Pairs each detection with the ground-truth ellipse whose bounding box
/// overlaps it most, keeping pairs at IoU >= `min_iou`. Image paths are
/// compared without extensions.
pub fn training_pairs(records: &[FeatureRecord], gts: &[AnnotatedImage], min_iou: f64) -> TrainingPairs {
    let by_image: std::collections::HashMap<String, &AnnotatedImage> = gts.iter().map(|g| (image_key(&g.path), g)).collect();
    let mut out = TrainingPairs::default();
    for r in records {
        let best = by_image.get(&image_key(&r.image)).and_then(|g| {
            g.ellipses
                .iter()
                .map(|e| (iou(&r.bbox, &e.bounding_box()), e))
                .max_by(|a, b| a.0.total_cmp(&b.0))
        });
        match best {
            Some((o, e)) if o >= min_iou => match encode(&r.bbox, e) {
                Ok(t) => {
                    out.features.push(r.features.iter().map(|&v| v as f64).collect());
                    out.targets.push(t);
                }
                Err(_) => out.degenerate += 1,
            },
            _ => out.unmatched += 1,
        }
    }
    out
}

/// Human-readable fit summary.
pub fn fit_report(fit: &EllipseFit) -> String {
    let names = ["t_xc", "t_yc", "t_ra", "t_rb", "t_theta"];
    let mut s = String::from("target,train_rmse,cv_rmse\n");
    for k in 0..5 {
        let _ = writeln!(s, "{},{},{}", names[k], fit.train_rmse[k], fit.cv_rmse[k]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_to_ellipse;

    fn bx() -> BBox {
        BBox::new(10.0, 20.0, 30.0, 40.0).unwrap()
    }

    #[test]
    fn pairs_match_by_overlap_and_path_stem() {
        use crate::dataset::AnnotatedImage;
        let gt = AnnotatedImage {
            path: "set/img_1".into(),
            boxes: vec![],
            ellipses: vec![box_to_ellipse(&bx()), Ellipse::new(200.0, 200.0, 10.0, 5.0, 0.0).unwrap()],
        };
        let rec = |x: f64| FeatureRecord { image: "set/img_1.ppm".into(), bbox: BBox::new(x, 20.0, 30.0, 40.0).unwrap(), features: vec![1.0, 2.0] };
        let far = FeatureRecord { bbox: BBox::new(190.0, 195.0, 20.0, 10.0).unwrap(), ..rec(0.0) };
        let p = training_pairs(&[rec(10.0), rec(12.0), rec(500.0), far], &[gt], 0.5);
        assert_eq!(p.targets.len(), 2);
        assert_eq!(p.features[0], vec![1.0, 2.0]);
        assert!(p.targets[0].to_array().iter().all(|v| v.abs() < 1e-12));
        assert_eq!((p.unmatched, p.degenerate), (1, 1));
    }

    #[test]
    fn encode_examples() {
        let t = encode(&bx(), &box_to_ellipse(&bx())).unwrap();
        for v in t.to_array() {
            assert!(v.abs() < 1e-15, "{t:?}");
        }
        let e = Ellipse { ra: 40.0, ..box_to_ellipse(&bx()) };
        assert!((encode(&bx(), &e).unwrap().t_ra - 2f64.ln()).abs() < 1e-15);
        let e = Ellipse { theta: std::f64::consts::FRAC_PI_4, ..box_to_ellipse(&bx()) };
        assert!((encode(&bx(), &e).unwrap().t_theta - 1.0).abs() < 1e-15);
        let e = Ellipse { theta: 0.0, ..box_to_ellipse(&bx()) };
        assert!(encode(&bx(), &e).is_err());
    }

    #[test]
    fn decode_examples() {
        let zero = EllipseTargets::from_array([0.0; 5]);
        let e = decode(&bx(), &zero);
        let want = box_to_ellipse(&bx());
        assert_eq!((e.cx, e.cy, e.ra, e.rb, e.theta), (want.cx, want.cy, want.ra, want.rb, want.theta));
    }

    #[test]
    fn constant_targets_give_bias_only() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 % 7.0]).collect();
        let t = vec![EllipseTargets::from_array([0.5, -1.0, 2.0, 0.0, 3.0]); 20];
        let m = fit_model(&feats, &t, DEFAULT_RIDGE, "test").unwrap();
        for (k, w) in m.weights.iter().enumerate() {
            assert!(w[0].abs() < 1e-12 && w[1].abs() < 1e-12);
            assert!((w[2] - t[0].to_array()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let feats = vec![vec![1.0, 2.0, 3.0]; 3];
        let t = vec![EllipseTargets::from_array([0.0; 5]); 3];
        assert!(matches!(fit_model(&feats, &t, DEFAULT_RIDGE, "x"), Err(Error::Data(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let m = EllipseModel { feature_id: "foveal".into(), dim: 2, weights: [0, 1, 2, 3, 4].map(|k| vec![k as f64, 0.5, -1.0]) };
        assert_eq!(EllipseModel::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(EllipseModel::from_bytes(&m.to_bytes()[..20]).is_err());
    }
}
