use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinyface::dataset::{
    generate_synthetic, parse_fddb_str, parse_wider_str, render_synthetic, sample_height, write_fddb, write_wider,
    AnnotatedImage, Annotation, Attributes, Dataset, Manifest, SyntheticSpec, MANIFEST_NAME,
};
use tinyface::geometry::{BBox, Ellipse};
use tinyface::Error;

/// Heights are whole pixels: P(H <= k) is the log-uniform CDF at k + 0.5,
/// with the rounding boundaries clamped to the support.
fn rounded_log_uniform_cdf(k: f64, lo: f64, hi: f64) -> f64 {
    let x = (k + 0.5).clamp(lo, hi);
    (x / lo).ln() / (hi / lo).ln()
}

fn ks_statistic(mut heights: Vec<f64>, lo: f64, hi: f64) -> f64 {
    heights.sort_by(f64::total_cmp);
    let n = heights.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < heights.len() {
        let v = heights[i];
        let below = i as f64 / n;
        while i < heights.len() && heights[i] == v {
            i += 1;
        }
        let at = i as f64 / n;
        let f = rounded_log_uniform_cdf(v, lo, hi);
        let f_prev = rounded_log_uniform_cdf(v - 1.0, lo, hi);
        d = d.max((at - f).abs()).max((below - f_prev).abs());
    }
    d
}

#[test]
fn sampled_heights_are_log_uniform() {
    let spec = SyntheticSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hs: Vec<f64> = (0..1000).map(|_| sample_height(&spec, &mut rng)).collect();
    let d = ks_statistic(hs, spec.min_height, spec.max_height);
    assert!(d < 0.05, "KS statistic {d}");
}

#[test]
fn rendered_object_heights_are_log_uniform() {
    let spec = SyntheticSpec::default();
    let mut hs = Vec::new();
    let mut i = 0;
    while hs.len() < 1000 {
        hs.extend(render_synthetic(&spec, i).unwrap().boxes.iter().map(|b| b.h));
        i += 1;
    }
    hs.truncate(1000);
    let d = ks_statistic(hs, spec.min_height, spec.max_height);
    assert!(d < 0.05, "KS statistic {d}");
}

#[test]
fn rendered_objects_are_disjoint_and_inside() {
    let spec = SyntheticSpec { max_objects: 12, ..SyntheticSpec::default() };
    for i in 0..20 {
        let s = render_synthetic(&spec, i).unwrap();
        for (k, a) in s.boxes.iter().enumerate() {
            assert!(a.x >= 0.0 && a.y >= 0.0 && a.right() <= spec.width as f64 && a.bottom() <= spec.height as f64);
            assert_eq!(a.w, (a.h * spec.aspect).round());
            for b in &s.boxes[..k] {
                assert_eq!(a.intersection_area(b), 0.0);
            }
        }
    }
}

#[test]
fn generated_dataset_round_trips_and_is_deterministic() {
    let spec = SyntheticSpec { width: 160, height: 160, max_height: 120.0, seed: 9, ..SyntheticSpec::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_synthetic(&spec, 6, a.path()).unwrap();
    generate_synthetic(&spec, 6, b.path()).unwrap();
    let text = std::fs::read_to_string(a.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.path().join(MANIFEST_NAME)).unwrap());
    let m = Manifest::parse(&text, "m").unwrap();
    assert_eq!(m, da.manifest);
    assert_eq!(m.to_text().unwrap(), text);
    for i in 0..6 {
        let name = &m.images[i].path;
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let opened = Dataset::open(a.path()).unwrap();
    assert_eq!(opened.len(), 6);
    let img = opened.load_image(0).unwrap();
    assert_eq!((img.width(), img.height()), (160, 160));
    let mean = m.mean_rgb().unwrap();
    assert!(mean.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn wider_errors_name_the_line() {
    match parse_wider_str("a.jpg\n2\n1 2 3 4 0 0 0 0 0 0\n", "w.txt") {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("last good line 3"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_wider_str("a.jpg\n1\n1 2 0 4 0 0 0 0 0 0\n", "w").is_err());
    assert!(parse_wider_str("a.jpg\n1\n1 2 3.5 4 0 0 0 0 0 0\n", "w").is_err());
    assert!(parse_wider_str("a.jpg\nx\n", "w").is_err());
}

fn arb_image() -> impl Strategy<Value = AnnotatedImage> {
    let ann = (0i64..500, 0i64..500, 1i64..300, 1i64..300, prop::array::uniform6(0u8..3)).prop_map(|(x, y, w, h, f)| Annotation {
        bbox: BBox::new(x as f64, y as f64, w as f64, h as f64).unwrap(),
        attrs: Attributes::from_values(f),
    });
    ("[a-z]{1,8}/[a-z0-9_]{1,10}\\.jpg", prop::collection::vec(ann, 0..6))
        .prop_map(|(path, boxes)| AnnotatedImage { path, boxes, ellipses: Vec::new() })
}

fn arb_ellipse_image() -> impl Strategy<Value = AnnotatedImage> {
    let ell = (1.0..200.0f64, 1.0..200.0f64, -3.0..3.0f64, 0.0..500.0f64, 0.0..500.0f64)
        .prop_map(|(a, b, t, x, y)| Ellipse::new(x, y, a, b, t).unwrap());
    ("[a-z]{1,6}/img_[0-9]{1,4}", prop::collection::vec(ell, 0..5))
        .prop_map(|(path, ellipses)| AnnotatedImage { path, boxes: Vec::new(), ellipses })
}

proptest! {
    #[test]
    fn wider_round_trip(images in prop::collection::vec(arb_image(), 0..6)) {
        let text = write_wider(&images).unwrap();
        prop_assert_eq!(parse_wider_str(&text, "t").unwrap(), images);
    }

    #[test]
    fn fddb_round_trip(images in prop::collection::vec(arb_ellipse_image(), 0..6)) {
        let text = write_fddb(&images);
        prop_assert_eq!(parse_fddb_str(&text, "t").unwrap(), images);
    }
}
