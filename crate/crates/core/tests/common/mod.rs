//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyface::bank::{BankMode, Template, TemplateBank, TemplateSet};
use tinyface::geometry::{iou, BBox};
use tinyface::net::{grid_to_window, BlockConfig, FeatureNet, HeatmapStack, NetConfig};
use tinyface::pyramid::Raster;
use tinyface::training::{assign_labels, image_loss, sample_input, Label, TrainConfig, TrainImage};

/// Five blocks with the default strides and dilations but very few channels.
pub fn tiny_net(templates: usize) -> FeatureNet<f64> {
    let b = |out_channels, stride, dilation, pool| BlockConfig { out_channels, stride, dilation, pool };
    let cfg = NetConfig {
        blocks: vec![b(2, 2, 1, false), b(3, 2, 1, false), b(3, 2, 1, false), b(2, 1, 2, true), b(2, 1, 4, true)],
        seed: 7,
        ..NetConfig::default()
    };
    FeatureNet::new(cfg, templates).unwrap()
}

pub fn noise(w: usize, h: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// L = sum c_i h_i + 0.5 sum h_i^2 over logits and regression outputs.
fn quadratic_loss(h: &HeatmapStack, c: &[f64]) -> f64 {
    h.logits.iter().chain(&h.regression).zip(c).map(|(v, ci)| ci * v + 0.5 * v * v).sum()
}

fn quadratic_grad(h: &HeatmapStack, c: &[f64]) -> HeatmapStack {
    let mut g = h.zeros_like();
    let n = h.logits.len();
    for (i, v) in g.logits.iter_mut().enumerate() {
        *v = c[i] + h.logits[i];
    }
    for (i, v) in g.regression.iter_mut().enumerate() {
        *v = c[n + i] + h.regression[i];
    }
    g
}

/// Worst relative error between backprop and central differences, per tensor.
pub fn gradient_errors(net: &FeatureNet<f64>, img: &Raster) -> Vec<(String, f64)> {
    let (h, cache) = net.forward_cached(img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c: Vec<f64> = (0..h.logits.len() + h.regression.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = net.backward(&cache, &quadratic_grad(&h, &c)).unwrap();
    let eps = 1e-3;
    let names: Vec<String> = net.params.tensors().into_iter().map(|t| t.name).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.data.to_vec()).collect();
    let mut out = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic[ti].iter().enumerate() {
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params.tensors_mut()[ti][i] += delta;
                quadratic_loss(&n.forward(img).unwrap(), &c)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
        }
        out.push((name, worst));
    }
    out
}

/// A 40x40 A template and a 12x12 B template (active only at 2x).
pub fn two_template_bank() -> TemplateBank {
    TemplateBank {
        templates: vec![
            Template::new(40.0, 40.0, 1.0, TemplateSet::A, 0),
            Template::new(12.0, 12.0, 2.0, TemplateSet::B, 1),
        ],
        mode: BankMode::Pruned,
        dropped: vec![],
    }
}

#[derive(Debug, Default)]
pub struct MaskingOutcome {
    /// Ignored windows inside the valid area with IoU in (neg, pos).
    pub ambiguous: usize,
    /// Ignored windows partly over padding or off the crop.
    pub border: usize,
    /// Ignored windows entirely over padding or off the crop.
    pub padded: usize,
    /// Cells of channels not evaluated at the sampled scale.
    pub inactive: usize,
    pub same_heatmap_grad: bool,
    pub same_param_grad: bool,
}

/// Samples a padded training crop, perturbs every output at ignore cells and
/// compares the loss gradients before and after.
pub fn masking_case(seed: u64) -> MaskingOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = TrainImage {
        image: noise(100, 90, seed),
        boxes: vec![
            BBox::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..40.0), 40.0, 40.0).unwrap(),
            BBox::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..40.0), 44.0, 30.0).unwrap(),
        ],
    };
    let cfg = TrainConfig { crop: 128, scales: vec![1.0], ..TrainConfig::default() };
    let s = sample_input(&img, &cfg, [0.5; 3], &mut rng).unwrap();
    let bank = two_template_bank();
    let net = tiny_net(bank.len());
    let (heat, cache) = net.forward_cached(&s.input).unwrap();
    let labels = assign_labels(&s.gt, &bank, (heat.grid_w, heat.grid_h), s.scale, &s.valid, cfg.pos_iou, cfg.neg_iou);

    let mut out = MaskingOutcome::default();
    let active = bank.active_channels(s.scale);
    let mut perturbed = heat.clone();
    let cells = labels.cells();
    for c in 0..bank.len() {
        for gy in 0..labels.grid_h {
            for gx in 0..labels.grid_w {
                let i = labels.index(c, gx, gy);
                if labels.labels[i] != Label::Ignore {
                    continue;
                }
                if !active.contains(&c) {
                    out.inactive += 1;
                } else {
                    let w = grid_to_window(gx, gy, &bank.templates[c], 1.0);
                    let inside = w.is_inside(&s.valid);
                    let touches = w.x < s.valid.right() && w.right() > s.valid.x && w.y < s.valid.bottom() && w.bottom() > s.valid.y;
                    if inside {
                        let best = s.gt.iter().map(|g| iou(&w, g)).fold(0.0, f64::max);
                        assert!(best >= cfg.neg_iou && best <= cfg.pos_iou, "ignored window with IoU {best}");
                        out.ambiguous += 1;
                    } else if touches {
                        out.border += 1;
                    } else {
                        out.padded += 1;
                    }
                }
                perturbed.logits[i] += rng.gen_range(-50.0..50.0);
                for j in 0..4 {
                    perturbed.regression[(4 * c + j) * cells + gy * labels.grid_w + gx] += rng.gen_range(-5.0..5.0);
                }
            }
        }
    }
    let a = image_loss(&heat, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let b = image_loss(&perturbed, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    out.same_heatmap_grad = a.grad == b.grad && a.selected == b.selected && a.objective == b.objective;
    out.same_param_grad = net.backward(&cache, &a.grad).unwrap() == net.backward(&cache, &b.grad).unwrap();
    out
}
