use proptest::prelude::*;
use tinyface::geometry::{iou, nms, nms_indices, shape_jaccard_distance, BBox, Shape};

fn arb_box() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64, 0.0..1.0f64)
        .prop_map(|(x, y, w, h, s)| BBox::with_score(x, y, w, h, s).unwrap())
}

fn int_box() -> impl Strategy<Value = BBox> {
    (0u32..48, 0u32..48, 1u32..16, 1u32..16, 0u32..20)
        .prop_map(|(x, y, w, h, s)| BBox::with_score(x as f64, y as f64, w as f64, h as f64, s as f64 / 20.0).unwrap())
}

/// Pixel count of the intersection and union on the unit grid.
fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..64 {
        for x in 0..64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let ia = px > a.x && px < a.right() && py > a.y && py < a.bottom();
            let ib = px > b.x && px < b.right() && py > b.y && py < b.bottom();
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

fn oracle_nms(boxes: &[BBox], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            if boxes[alive[k]].score > boxes[alive[best]].score {
                best = k;
            }
        }
        let i = alive.remove(best);
        kept.push(i);
        alive.retain(|&j| raster_iou(&boxes[i], &boxes[j]) <= threshold);
    }
    kept
}

proptest! {
    #[test]
    fn iou_matches_rasterization_on_integer_boxes(a in int_box(), b in int_box()) {
        prop_assert_eq!(iou(&a, &b), raster_iou(&a, &b));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_invariant_under_translation_and_scale(a in arb_box(), b in arb_box(), dx in -100.0..100.0f64, s in 0.1..10.0f64) {
        let v = iou(&a, &b);
        let t = iou(&a.translated(dx, -dx), &b.translated(dx, -dx));
        let z = iou(&a.scaled(s, s), &b.scaled(s, s));
        prop_assert!((v - t).abs() < 1e-9);
        prop_assert!((v - z).abs() < 1e-9);
    }

    #[test]
    fn nms_matches_greedy_oracle(boxes in prop::collection::vec(int_box(), 0..40), thr in 0.1..0.9f64) {
        prop_assert_eq!(nms_indices(&boxes, thr), oracle_nms(&boxes, thr));
    }

    #[test]
    fn nms_output_is_sparse_and_complete(boxes in prop::collection::vec(arb_box(), 0..40), thr in 0.05..0.95f64) {
        let keep = nms_indices(&boxes, thr);
        for (n, &i) in keep.iter().enumerate() {
            for &j in &keep[..n] {
                prop_assert!(iou(&boxes[i], &boxes[j]) <= thr);
                prop_assert!(boxes[j].score >= boxes[i].score);
            }
        }
        for i in (0..boxes.len()).filter(|i| !keep.contains(i)) {
            prop_assert!(keep.iter().any(|&k| iou(&boxes[k], &boxes[i]) > thr && boxes[k].score >= boxes[i].score));
        }
        prop_assert_eq!(nms(&boxes, thr).len(), keep.len());
    }

    #[test]
    fn shape_distance_is_a_bounded_symmetric_dissimilarity(h1 in 1.0..300.0f64, w1 in 1.0..300.0f64, h2 in 1.0..300.0f64, w2 in 1.0..300.0f64) {
        let (a, b) = (Shape::new(h1, w1).unwrap(), Shape::new(h2, w2).unwrap());
        let d = shape_jaccard_distance(a, b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, shape_jaccard_distance(b, a));
        prop_assert_eq!(shape_jaccard_distance(a, a), 0.0);
    }
}

#[test]
fn nms_keeps_lower_index_on_equal_scores() {
    let a = BBox::with_score(0.0, 0.0, 10.0, 10.0, 0.5).unwrap();
    assert_eq!(nms_indices(&[a, a, a], 0.3), vec![0]);
}
