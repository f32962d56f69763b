//! Boxes, ellipses, overlap measures and greedy non-maximum suppression.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates with an attached score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BBox {
    /// Checked constructor; `w` and `h` must be positive and every field finite.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::with_score(x, y, w, h, 0.0)
    }

    pub fn with_score(x: f64, y: f64, w: f64, h: f64, score: f64) -> Result<Self> {
        let b = BBox { x, y, w, h, score };
        if !b.is_valid() {
            return Err(Error::Geometry(format!("invalid box ({x}, {y}, {w}, {h})")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h, score: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        self.x + 0.5 * self.w
    }

    #[inline]
    pub fn cy(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    #[inline]
    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn shape(&self) -> Shape {
        Shape { h: self.h, w: self.w }
    }

    /// Uniform scaling of position and extent about the origin.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        BBox { x: self.x * sx, y: self.y * sy, w: self.w * sx, h: self.h * sy, score: self.score }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// True when `self` lies entirely inside `outer` (shared edges allowed).
    pub fn is_inside(&self, outer: &BBox) -> bool {
        self.x >= outer.x
            && self.y >= outer.y
            && self.right() <= outer.right()
            && self.bottom() <= outer.bottom()
    }
}

/// A bounding-box shape `(h, w)` with position factored out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub h: f64,
    pub w: f64,
}

impl Shape {
    pub fn new(h: f64, w: f64) -> Result<Self> {
        if !(h.is_finite() && w.is_finite() && h > 0.0 && w > 0.0) {
            return Err(Error::Geometry(format!("invalid shape ({h}, {w})")));
        }
        Ok(Shape { h, w })
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    pub fn scaled(&self, s: f64) -> Shape {
        Shape { h: self.h * s, w: self.w * s }
    }
}

/// Rotated ellipse. `ra` is the half major axis, `rb` the half minor axis and
/// `theta` the angle of the major axis from the image x-axis, kept in `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ra: f64,
    pub rb: f64,
    pub theta: f64,
    pub score: f64,
}

impl Ellipse {
    /// Builds a canonical ellipse: radii are swapped (and the angle rotated by
    /// a quarter turn) when `ra < rb`, and the angle is wrapped into `[0, pi)`.
    pub fn new(cx: f64, cy: f64, ra: f64, rb: f64, theta: f64) -> Result<Self> {
        if ![cx, cy, ra, rb, theta].iter().all(|v| v.is_finite()) || ra <= 0.0 || rb <= 0.0 {
            return Err(Error::Geometry(format!(
                "invalid ellipse (cx={cx}, cy={cy}, ra={ra}, rb={rb}, theta={theta})"
            )));
        }
        let (ra, rb, theta) = if ra < rb { (rb, ra, theta + FRAC_PI_2) } else { (ra, rb, theta) };
        Ok(Ellipse { cx, cy, ra, rb, theta: wrap_angle(theta), score: 0.0 })
    }

    /// Axis-aligned bounding rectangle of the ellipse.
    pub fn bounding_box(&self) -> BBox {
        let (s, c) = self.theta.sin_cos();
        let hx = ((self.ra * c).powi(2) + (self.rb * s).powi(2)).sqrt();
        let hy = ((self.ra * s).powi(2) + (self.rb * c).powi(2)).sqrt();
        BBox { x: self.cx - hx, y: self.cy - hy, w: 2.0 * hx, h: 2.0 * hy, score: self.score }
    }

    /// Point membership (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.ra).powi(2) + (v / self.rb).powi(2) <= 1.0
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Jaccard distance between two shapes compared as concentric rectangles.
pub fn shape_jaccard_distance(a: Shape, b: Shape) -> f64 {
    let inter = a.h.min(b.h) * a.w.min(b.w);
    let union = a.area() + b.area() - inter;
    (1.0 - inter / union).clamp(0.0, 1.0)
}

/// Indices kept by greedy NMS, in descending score order.
///
/// Candidates are visited by descending score (equal scores keep the lower
/// input index first); a candidate survives when its IoU with every already
/// kept box is at most `threshold`.
pub fn nms_indices(boxes: &[BBox], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept.iter().all(|&k| iou(&boxes[k], b) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum suppression; output sorted by descending score.
pub fn nms(boxes: &[BBox], threshold: f64) -> Vec<BBox> {
    nms_indices(boxes, threshold).into_iter().map(|i| boxes[i]).collect()
}

/// Upright ellipse inscribed in `b`: major half-axis along the box height.
pub fn box_to_ellipse(b: &BBox) -> Ellipse {
    Ellipse { cx: b.cx(), cy: b.cy(), ra: 0.5 * b.h, rb: 0.5 * b.w, theta: FRAC_PI_2, score: b.score }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Rasterized IoU on the unit integer grid; exact for integer boxes.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let x0 = a.x.min(b.x) as i64;
        let y0 = a.y.min(b.y) as i64;
        let x1 = a.right().max(b.right()) as i64;
        let y1 = a.bottom().max(b.bottom()) as i64;
        let (mut inter, mut union) = (0u64, 0u64);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x && px < a.right() && py > a.y && py < a.bottom();
                let inb = px > b.x && px < b.right() && py > b.y && py < b.bottom();
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        let b = bx(5.0, 0.0, 10.0, 10.0);
        assert!((raster_iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
        assert!((iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn shape_distance_examples() {
        let s = |h, w| Shape::new(h, w).unwrap();
        assert_eq!(shape_jaccard_distance(s(40.0, 40.0), s(40.0, 40.0)), 0.0);
        assert!((shape_jaccard_distance(s(40.0, 40.0), s(20.0, 20.0)) - 0.75).abs() < 1e-15);
        let d = shape_jaccard_distance(s(40.0, 20.0), s(20.0, 40.0));
        assert!((d - (1.0 - 400.0 / 1200.0)).abs() < 1e-15);
        // concentric raster oracle
        let a = BBox::from_center(50.0, 50.0, 20.0, 40.0);
        let b = BBox::from_center(50.0, 50.0, 40.0, 20.0);
        assert!((1.0 - raster_iou(&a, &b) - d).abs() < 1e-12);
    }

    #[test]
    fn nms_basics() {
        assert!(nms(&[], 0.3).is_empty());
        let a = BBox::with_score(0.0, 0.0, 10.0, 10.0, 0.9).unwrap();
        let b = BBox { score: 0.8, ..a };
        let kept = nms(&[b, a], 0.3);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = BBox::with_score(0.0, 0.0, 10.0, 10.0, 0.5).unwrap();
        let b = BBox::with_score(1.0, 0.0, 10.0, 10.0, 0.5).unwrap();
        assert_eq!(nms_indices(&[a, b], 0.3), vec![0]);
        assert_eq!(nms_indices(&[b, a], 0.3), vec![0]);
    }

    #[test]
    fn box_to_ellipse_examples() {
        let e = box_to_ellipse(&bx(0.0, 0.0, 10.0, 20.0));
        assert_eq!((e.cx, e.cy, e.ra, e.rb, e.theta), (5.0, 10.0, 10.0, 5.0, FRAC_PI_2));
        let e = box_to_ellipse(&bx(0.0, 0.0, 10.0, 10.0));
        assert_eq!((e.ra, e.rb), (5.0, 5.0));
    }

    #[test]
    fn ellipse_canonicalization() {
        let e = Ellipse::new(0.0, 0.0, 3.0, 5.0, 0.2).unwrap();
        assert_eq!((e.ra, e.rb), (5.0, 3.0));
        assert!((e.theta - (0.2 + FRAC_PI_2)).abs() < 1e-15);
        let e = Ellipse::new(0.0, 0.0, 5.0, 3.0, -0.5).unwrap();
        assert!((e.theta - (PI - 0.5)).abs() < 1e-15);
        assert!(Ellipse::new(0.0, 0.0, 0.0, 3.0, 0.1).is_err());
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }
}
