use proptest::prelude::*;
use tinyface::bank::{build_bank, regime_sigma, BankMode, TemplateBank, TemplateSet, PYRAMID_SCALES};
use tinyface::clustering::CanonicalShapes;
use tinyface::geometry::{shape_jaccard_distance, Shape};

fn log_spaced(k: usize) -> CanonicalShapes {
    let shapes = (0..k)
        .map(|i| {
            let h = 10.0 * (30.0f64).powf(i as f64 / (k - 1) as f64);
            Shape::new(h.round(), (0.8 * h).round()).unwrap()
        })
        .collect();
    CanonicalShapes::from_shapes(shapes, None).unwrap()
}

#[test]
fn regime_table_for_every_integer_height() {
    for h in 1..=500 {
        let expected = if h > 140 { 0.5 } else if h < 40 { 2.0 } else { 1.0 };
        assert_eq!(regime_sigma(h as f64), expected, "height {h}");
    }
}

#[test]
fn csv_round_trip_keeps_everything() {
    for prune in [false, true] {
        let bank = build_bank(&log_spaced(25), prune).unwrap();
        let back = TemplateBank::from_csv(&bank.to_csv(), "t").unwrap();
        assert_eq!(back, bank);
    }
}

#[test]
fn b_templates_only_run_upsampled() {
    let bank = build_bank(&log_spaced(25), true).unwrap();
    assert_eq!(bank.mode, BankMode::Pruned);
    for t in &bank.templates {
        let active: Vec<f64> = PYRAMID_SCALES.iter().copied().filter(|&s| bank.is_active(t.channel, s)).collect();
        match t.set {
            TemplateSet::B => assert_eq!(active, vec![2.0]),
            TemplateSet::A => assert_eq!(active, PYRAMID_SCALES.to_vec()),
        }
    }
}

proptest! {
    #[test]
    fn pruned_bank_covers_every_canonical_shape(hs in prop::collection::btree_set(10u32..300, 3..30)) {
        let shapes = hs.iter().map(|&h| Shape::new(h as f64, (0.8 * h as f64).round()).unwrap()).collect();
        let canon = CanonicalShapes::from_shapes(shapes, None).unwrap();
        let pruned = build_bank(&canon, true).unwrap();
        let full = build_bank(&canon, false).unwrap();
        prop_assert!(pruned.uncovered(&canon).is_empty());
        prop_assert!(full.uncovered(&canon).is_empty());
        prop_assert!(pruned.len() <= full.len());
        // each dropped target is detected closely by the template that covers it
        for d in &pruned.dropped {
            let t = &pruned.templates[d.covered_by];
            let detected = t.canonical().scaled(1.0 / d.scale);
            prop_assert!(shape_jaccard_distance(detected, d.target) <= 0.25);
        }
    }
}
