mod common;

use common::{masking_case, noise, two_template_bank};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinyface::dataset::{render_synthetic, SyntheticSpec};
use tinyface::geometry::BBox;
use tinyface::net::{FeatureNet, NetConfig};
use tinyface::training::{sample_input, train, TrainConfig, TrainImage, TrainOptions, TrainOutcome};
use tinyface::Error;

#[test]
fn ignore_cells_never_reach_the_gradient() {
    for seed in 0..20 {
        let o = masking_case(seed);
        assert!(o.same_heatmap_grad && o.same_param_grad, "seed {seed}: {o:?}");
        assert!(o.ambiguous > 0 && o.border > 0 && o.padded > 0 && o.inactive > 0, "seed {seed}: {o:?}");
    }
}

#[test]
fn scales_are_drawn_uniformly() {
    let img = TrainImage { image: noise(40, 40, 0), boxes: vec![] };
    let cfg = TrainConfig { crop: 64, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = sample_input(&img, &cfg, [0.0; 3], &mut rng).unwrap();
        counts[cfg.scales.iter().position(|&v| v == s.scale).unwrap()] += 1;
    }
    let p = 1.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn unit_scale_crop_inside_only_shifts_boxes() {
    let b = BBox::new(50.0, 60.0, 30.0, 20.0).unwrap();
    let img = TrainImage { image: noise(200, 180, 1), boxes: vec![b] };
    let cfg = TrainConfig { crop: 64, scales: vec![1.0], ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = sample_input(&img, &cfg, [0.0; 3], &mut rng).unwrap();
        let (x, y) = s.origin;
        assert!(x >= 0 && y >= 0);
        assert_eq!(s.gt, vec![b.translated(-(x as f64), -(y as f64))]);
        assert!(s.mask.iter().all(|&m| m));
        assert_eq!((s.valid.w, s.valid.h), (64.0, 64.0));
    }
}

#[test]
fn doubling_scale_doubles_boxes() {
    let b = BBox::new(10.0, 12.0, 15.0, 9.0).unwrap();
    let img = TrainImage { image: noise(50, 50, 2), boxes: vec![b] };
    let cfg = TrainConfig { crop: 64, scales: vec![2.0], ..TrainConfig::default() };
    let s = sample_input(&img, &cfg, [0.0; 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!((s.gt[0].w, s.gt[0].h), (30.0, 18.0));
    assert_eq!(s.gt[0].x, 20.0 - s.origin.0 as f64);
}

fn small_set(n: usize, seed: u64) -> Vec<TrainImage> {
    let spec = SyntheticSpec { width: 80, height: 80, max_objects: 3, min_height: 10.0, max_height: 60.0, seed, ..SyntheticSpec::default() };
    (0..n).map(|i| render_synthetic(&spec, i).map(|s| TrainImage { image: s.raster, boxes: s.boxes }).unwrap()).collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { crop: 64, epochs: 2, batch_size: 3, lr: 1e-3, val_every: 1, ..TrainConfig::default() }
}

fn run(threads: usize, data: &[TrainImage], val: &[TrainImage], cfg: &TrainConfig) -> tinyface::Result<TrainOutcome> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| train(data, val, &two_template_bank(), &NetConfig::default(), cfg, &TrainOptions::default()))
}

#[test]
fn training_is_identical_across_thread_counts() {
    let (data, val) = (small_set(6, 1), small_set(2, 2));
    let a = run(1, &data, &val, &small_cfg()).unwrap();
    let b = run(3, &data, &val, &small_cfg()).unwrap();
    assert_eq!(a.net.params, b.net.params);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn zero_learning_rate_keeps_the_initialisation() {
    let data = small_set(4, 3);
    let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
    let out = run(1, &data, &[], &cfg).unwrap();
    let init = FeatureNet::<f32>::new(NetConfig::default(), 2).unwrap();
    assert_eq!(out.net.params, init.params);
    assert_eq!(out.best_epoch, cfg.epochs);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = small_set(4, 4);
    let cfg = TrainConfig { lr: 1e12, momentum: 0.0, epochs: 5, ..small_cfg() };
    match run(1, &data, &[], &cfg) {
        Err(Error::Divergence { epoch, batch, .. }) => assert!(epoch >= 1 && batch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
    }
}
