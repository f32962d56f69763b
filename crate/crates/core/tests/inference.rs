mod common;

use common::{noise, two_template_bank};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyface::bank::{BankMode, Template, TemplateBank, TemplateSet};
use tinyface::geometry::{iou, BBox};
use tinyface::inference::{decode_level, detect, DetectConfig};
use tinyface::net::{FeatureNet, HeatmapStack, NetConfig, GRID_STRIDE};
use tinyface::pyramid::Raster;
use tinyface::training::{train, TrainConfig, TrainImage, TrainOptions};

fn random_heat(gw: usize, gh: usize, t: usize, seed: u64) -> HeatmapStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HeatmapStack {
        grid_w: gw,
        grid_h: gh,
        templates: t,
        logits: (0..t * gw * gh).map(|_| rng.gen_range(-6.0..6.0)).collect(),
        regression: (0..4 * t * gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// (channel, gx, gy, x, y, w, h, score) for every cell at or above threshold.
fn oracle(heat: &HeatmapStack, bank: &TemplateBank, scale: f64, thr: f64) -> Vec<(usize, usize, usize, [f64; 5])> {
    let mut out = Vec::new();
    let cells = heat.grid_w * heat.grid_h;
    for c in 0..bank.len() {
        let t = &bank.templates[c];
        let active = match t.set {
            TemplateSet::A => true,
            TemplateSet::B => scale == 2.0,
        };
        if !active {
            continue;
        }
        for gy in 0..heat.grid_h {
            for gx in 0..heat.grid_w {
                let k = gy * heat.grid_w + gx;
                let z = heat.logits[c * cells + k];
                let p = 1.0 / (1.0 + (-z).exp());
                if p < thr {
                    continue;
                }
                let r = |j: usize| heat.regression[(4 * c + j) * cells + k];
                let (aw, ah) = (t.canonical_w / scale, t.canonical_h / scale);
                let (acx, acy) = ((gx as f64 * 8.0 + 4.0) / scale, (gy as f64 * 8.0 + 4.0) / scale);
                let (w, h) = (aw * r(2).exp(), ah * r(3).exp());
                let (cx, cy) = (acx + r(0) * aw, acy + r(1) * ah);
                out.push((c, gx, gy, [cx - w / 2.0, cy - h / 2.0, w, h, p]));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_matches_brute_force(gw in 1usize..12, gh in 1usize..12, seed in 0u64..1000,
                                  scale in prop::sample::select(vec![0.5, 1.0, 2.0]), thr in 0.05..0.95f64) {
        let bank = two_template_bank();
        let heat = random_heat(gw, gh, bank.len(), seed);
        let mut got: Vec<_> = decode_level(&heat, &bank, scale, thr)
            .into_iter()
            .map(|d| (d.channel, d.gx, d.gy, [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score]))
            .collect();
        got.sort_by_key(|g| (g.0, g.2, g.1));
        let mut want = oracle(&heat, &bank, scale, thr);
        want.sort_by_key(|g| (g.0, g.2, g.1));
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!((g.0, g.1, g.2), (w.0, w.1, w.2));
            for j in 0..5 {
                prop_assert!((g.3[j] - w.3[j]).abs() < 1e-9 * (1.0 + w.3[j].abs()));
            }
        }
    }
}

/// Mean-coloured canvas with a noise patch whose corner is at `(x, y)`.
fn patch_image(x: usize, y: usize) -> Raster {
    let mut img = Raster::filled(160, 160, [0.5; 3]);
    let p = noise(40, 40, 9);
    for py in 0..40 {
        for px in 0..40 {
            for c in 0..3 {
                img.set(x + px, y + py, c, p.get(px, py, c));
            }
        }
    }
    img
}

fn max_shift_deviation(shift: usize) -> f64 {
    let net = FeatureNet::<f32>::new(NetConfig { mean_rgb: [0.5; 3], seed: 3, ..NetConfig::default() }, 2).unwrap();
    let a = net.forward(&patch_image(40, 48)).unwrap();
    let b = net.forward(&patch_image(40 + shift, 48 + shift)).unwrap();
    let d = shift / GRID_STRIDE;
    let mut worst: f64 = 0.0;
    let mut nonzero = false;
    for t in 0..a.templates {
        for gy in 1..a.grid_h - 1 - d {
            for gx in 1..a.grid_w - 1 - d {
                let (u, v) = (a.logit(t, gx, gy), b.logit(t, gx + d, gy + d));
                nonzero |= u != 0.0;
                worst = worst.max((u - v).abs());
                for j in 0..4 {
                    worst = worst.max((a.reg(t, gx, gy)[j] - b.reg(t, gx + d, gy + d)[j]).abs());
                }
            }
        }
    }
    assert!(nonzero, "heatmaps are all zero");
    worst
}

#[test]
fn shifting_by_one_stride_shifts_heatmaps_by_one_cell() {
    assert!(max_shift_deviation(8) < 1e-5);
}

#[test]
fn shifting_by_four_strides_shifts_heatmaps_by_four_cells() {
    assert!(max_shift_deviation(32) < 1e-5);
}

#[test]
fn overfits_a_single_object() {
    // centred on grid cell (6, 5)
    let target = BBox::new(32.0, 24.0, 40.0, 40.0).unwrap();
    let mut image = Raster::filled(128, 128, [0.2, 0.3, 0.4]);
    for y in 24..64 {
        for x in 32..72 {
            let on = (x / 5 + y / 5) % 2 == 0;
            for c in 0..3 {
                image.set(x, y, c, if on { 0.9 } else { 0.6 });
            }
        }
    }
    let data = vec![TrainImage { image: image.clone(), boxes: vec![target] }];
    let bank = TemplateBank {
        templates: vec![Template::new(40.0, 40.0, 1.0, TemplateSet::A, 0)],
        mode: BankMode::Pruned,
        dropped: vec![],
    };
    let net_cfg = NetConfig { mean_rgb: image.mean_rgb(), ..NetConfig::default() };
    let cfg = TrainConfig { crop: 128, batch_size: 1, epochs: 300, lr: 0.001, scales: vec![1.0], ..TrainConfig::default() };
    let out = train(&data, &[], &bank, &net_cfg, &cfg, &TrainOptions::default()).unwrap();
    let dc = DetectConfig { scales: vec![1.0], ..DetectConfig::default() };
    let dets = detect(&out.net, &bank, &image, &dc).unwrap();
    assert_eq!(dets.len(), 1, "{dets:?}");
    assert!(iou(&dets[0].bbox, &target) > 0.5, "{:?}", dets[0]);
}
