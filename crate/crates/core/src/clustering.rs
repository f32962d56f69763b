//! Canonical bounding-box shapes by k-medoids clustering under Jaccard distance.
//!
//! Identical input shapes are collapsed and carried as weighted points, so the
//! cost of a medoid is the multiplicity-weighted sum of distances to it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{shape_jaccard_distance, Shape};

/// Shapes farther than this from every canonical shape are rejected.
pub const MAX_ASSIGN_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ShapeClusterConfig {
    fn default() -> Self {
        ShapeClusterConfig { k: 25, max_iters: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalShapes {
    /// Medoid shapes sorted by ascending height (then width).
    pub shapes: Vec<Shape>,
    /// For every input shape, the index of its canonical shape.
    pub assignment: Vec<usize>,
    /// Number of input shapes assigned to each canonical shape.
    pub counts: Vec<usize>,
    /// Weighted objective after every assignment step, first entry from seeding.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl CanonicalShapes {
    /// Wraps a fixed list of shapes (e.g. read back from CSV) without training data.
    pub fn from_shapes(mut shapes: Vec<Shape>, counts: Option<Vec<usize>>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config("canonical shape set is empty".into()));
        }
        let mut counts = counts.unwrap_or_else(|| vec![0; shapes.len()]);
        if counts.len() != shapes.len() {
            return Err(Error::Config("shape and count lengths differ".into()));
        }
        let mut idx: Vec<usize> = (0..shapes.len()).collect();
        idx.sort_by(|&a, &b| shape_order(&shapes[a], &shapes[b]));
        shapes = idx.iter().map(|&i| shapes[i]).collect();
        counts = idx.iter().map(|&i| counts[i]).collect();
        Ok(CanonicalShapes {
            shapes,
            assignment: Vec::new(),
            counts,
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
        })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    /// `index,h,w,count` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,h,w,count\n");
        for (i, (sh, n)) in self.shapes.iter().zip(&self.counts).enumerate() {
            s.push_str(&format!("{i},{},{},{n}\n", sh.h, sh.w));
        }
        s
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == "index,h,w,count" => {}
            Some((i, _)) => return Err(Error::parse(path, i + 1, "expected header index,h,w,count")),
            None => return Err(Error::parse(path, 1, "empty shape file")),
        }
        let mut shapes = Vec::new();
        let mut counts = Vec::new();
        for (i, l) in lines {
            let f: Vec<&str> = l.trim().split(',').collect();
            let bad = || Error::parse(path, i + 1, format!("bad shape row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let h: f64 = f[1].parse().map_err(|_| bad())?;
            let w: f64 = f[2].parse().map_err(|_| bad())?;
            counts.push(f[3].parse().map_err(|_| bad())?);
            shapes.push(Shape::new(h, w).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
        }
        Self::from_shapes(shapes, Some(counts))
    }
}

fn shape_order(a: &Shape, b: &Shape) -> std::cmp::Ordering {
    a.h.total_cmp(&b.h).then(a.w.total_cmp(&b.w))
}

/// Result of matching one shape against the canonical set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Matched { index: usize, distance: f64 },
    Rejected { nearest: usize, distance: f64 },
}

/// Nearest canonical shape (lower index on ties); rejected beyond distance 0.5.
pub fn assign_to_canonical(s: Shape, canon: &CanonicalShapes) -> Assignment {
    let (index, distance) = nearest(s, &canon.shapes);
    if distance > MAX_ASSIGN_DISTANCE {
        Assignment::Rejected { nearest: index, distance }
    } else {
        Assignment::Matched { index, distance }
    }
}

fn nearest(s: Shape, centers: &[Shape]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = shape_jaccard_distance(s, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Distinct shapes with their multiplicities, in first-seen order.
struct Weighted {
    points: Vec<Shape>,
    weights: Vec<f64>,
    /// input index -> distinct index
    origin: Vec<usize>,
}

fn collapse(shapes: &[Shape]) -> Weighted {
    let mut map: HashMap<(u64, u64), usize> = HashMap::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut origin = Vec::with_capacity(shapes.len());
    for s in shapes {
        let key = (s.h.to_bits(), s.w.to_bits());
        let id = *map.entry(key).or_insert_with(|| {
            points.push(*s);
            weights.push(0.0);
            points.len() - 1
        });
        weights[id] += 1.0;
        origin.push(id);
    }
    Weighted { points, weights, origin }
}

/// k-medoids (alternating assign/update) with farthest-first seeding.
pub fn cluster_shapes(shapes: &[Shape], cfg: &ShapeClusterConfig) -> Result<CanonicalShapes> {
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    for s in shapes {
        Shape::new(s.h, s.w)?;
    }
    let data = collapse(shapes);
    let n = data.points.len();
    if n < cfg.k {
        return Err(Error::Config(format!(
            "need at least k={} distinct shapes, got {n}",
            cfg.k
        )));
    }

    let mut medoids = seed_farthest_first(&data, cfg.k, cfg.seed);
    let mut labels = vec![0usize; n];
    let mut trace = vec![assign(&data, &medoids, &mut labels)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let updated = update_medoids(&data, &medoids, &labels);
        if updated == medoids {
            converged = true;
            break;
        }
        medoids = updated;
        let obj = assign(&data, &medoids, &mut labels);
        debug_assert!(obj <= trace.last().copied().unwrap_or(f64::INFINITY) + 1e-9);
        trace.push(obj);
    }

    // Reorder clusters by ascending medoid height.
    let mut order: Vec<usize> = (0..cfg.k).collect();
    order.sort_by(|&a, &b| shape_order(&data.points[medoids[a]], &data.points[medoids[b]]));
    let mut rank = vec![0usize; cfg.k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let canon_shapes: Vec<Shape> = order.iter().map(|&c| data.points[medoids[c]]).collect();
    let assignment: Vec<usize> = data.origin.iter().map(|&d| rank[labels[d]]).collect();
    let mut counts = vec![0usize; cfg.k];
    for &a in &assignment {
        counts[a] += 1;
    }

    Ok(CanonicalShapes {
        shapes: canon_shapes,
        assignment,
        counts,
        objective_trace: trace,
        iterations,
        converged,
    })
}

fn seed_farthest_first(data: &Weighted, k: usize, seed: u64) -> Vec<usize> {
    let n = data.points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut medoids = vec![first];
    let mut min_d: Vec<f64> =
        data.points.iter().map(|p| shape_jaccard_distance(*p, data.points[first])).collect();
    while medoids.len() < k {
        let mut best = (usize::MAX, -1.0);
        for (i, &d) in min_d.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        let m = best.0;
        medoids.push(m);
        for (i, p) in data.points.iter().enumerate() {
            let d = shape_jaccard_distance(*p, data.points[m]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    medoids
}

/// Assigns each point to its nearest medoid; returns the weighted objective.
fn assign(data: &Weighted, medoids: &[usize], labels: &mut [usize]) -> f64 {
    let centers: Vec<Shape> = medoids.iter().map(|&m| data.points[m]).collect();
    let mut total = 0.0;
    for (i, p) in data.points.iter().enumerate() {
        let (c, d) = nearest(*p, &centers);
        labels[i] = c;
        total += data.weights[i] * d;
    }
    total
}

/// Best medoid of every cluster; the incumbent is kept unless strictly beaten.
fn update_medoids(data: &Weighted, medoids: &[usize], labels: &[usize]) -> Vec<usize> {
    let k = medoids.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    medoids
        .iter()
        .enumerate()
        .map(|(c, &current)| {
            let cost = |cand: usize| -> f64 {
                members[c]
                    .iter()
                    .map(|&j| data.weights[j] * shape_jaccard_distance(data.points[cand], data.points[j]))
                    .sum()
            };
            let mut best = (current, cost(current));
            for &cand in &members[c] {
                if cand == current {
                    continue;
                }
                let v = cost(cand);
                if v < best.1 || (v == best.1 && cand < best.0) {
                    best = (cand, v);
                }
            }
            best.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(h: f64, w: f64) -> Shape {
        Shape::new(h, w).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let c = CanonicalShapes::from_shapes(vec![s(30.0, 24.0), s(12.5, 10.0)], Some(vec![4, 9])).unwrap();
        let back = CanonicalShapes::from_csv(&c.to_csv(), "t").unwrap();
        assert_eq!(back.shapes, c.shapes);
        assert_eq!(back.counts, vec![9, 4]);
        assert!(CanonicalShapes::from_csv("index,h,w,count\n0,1,x,2\n", "t").is_err());
    }

    #[test]
    fn two_separated_groups() {
        let mut shapes = vec![s(10.0, 10.0); 5];
        shapes.extend(vec![s(100.0, 100.0); 5]);
        let cfg = ShapeClusterConfig { k: 2, ..Default::default() };
        let c = cluster_shapes(&shapes, &cfg).unwrap();
        assert_eq!(c.shapes, vec![s(10.0, 10.0), s(100.0, 100.0)]);
        assert_eq!(c.counts, vec![5, 5]);
        assert_eq!(c.final_objective(), Some(0.0));
    }

    #[test]
    fn every_distinct_shape_is_its_own_medoid() {
        let shapes = vec![s(10.0, 8.0), s(20.0, 16.0), s(20.0, 16.0), s(50.0, 30.0)];
        let cfg = ShapeClusterConfig { k: 3, ..Default::default() };
        let c = cluster_shapes(&shapes, &cfg).unwrap();
        assert_eq!(c.shapes.len(), 3);
        assert_eq!(c.final_objective(), Some(0.0));
        assert_eq!(c.assignment, vec![0, 1, 1, 2]);
    }

    #[test]
    fn too_few_distinct_shapes() {
        let shapes = vec![s(10.0, 10.0); 7];
        let cfg = ShapeClusterConfig { k: 2, ..Default::default() };
        assert!(matches!(cluster_shapes(&shapes, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn assignment_examples() {
        let canon = CanonicalShapes::from_shapes(vec![s(100.0, 100.0), s(20.0, 20.0)], None).unwrap();
        assert_eq!(
            assign_to_canonical(s(20.0, 20.0), &canon),
            Assignment::Matched { index: 0, distance: 0.0 }
        );
        let only_big = CanonicalShapes::from_shapes(vec![s(100.0, 100.0)], None).unwrap();
        match assign_to_canonical(s(1.0, 1.0), &only_big) {
            Assignment::Rejected { nearest, distance } => {
                assert_eq!(nearest, 0);
                assert!((distance - (1.0 - 1.0 / 10000.0)).abs() < 1e-15);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn assignment_tie_prefers_lower_index() {
        // (20,10) and (10,20) are equidistant from (10,10)... and from (20,20)
        let canon = CanonicalShapes::from_shapes(vec![s(20.0, 10.0), s(10.0, 20.0)], None).unwrap();
        match assign_to_canonical(s(20.0, 20.0), &canon) {
            Assignment::Matched { index, .. } => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
    }
}
