//! Scores a simulated detector against synthetic ground truth: AP, FDDB
//! curves, false-positive modes and per-height sensitivity.
//!
//! `cargo run --release --example evaluate`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyface::dataset::SyntheticSpec;
use tinyface::eval::{ap, diagnose, fddb_curve, sensitivity, Characteristic, GroundTruth, Region};
use tinyface::experiment::render_split;
use tinyface::geometry::{box_to_ellipse, BBox};

fn main() -> tinyface::Result<()> {
    let images = render_split(&SyntheticSpec { seed: 5, ..SyntheticSpec::default() }, 50)?;
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|t| t.boxes.iter().map(|b| GroundTruth::new(*b)).collect()).collect();

    // jittered true boxes that miss more often when small, plus clutter
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dets: Vec<Vec<BBox>> = images
        .iter()
        .map(|t| {
            let mut d = Vec::new();
            for b in &t.boxes {
                if rng.gen::<f64>() < (b.h / 40.0).min(0.95) {
                    let j = 0.08 * b.w;
                    let (dx, dy) = (rng.gen_range(-j..j), rng.gen_range(-j..j));
                    d.push(BBox::with_score(b.x + dx, b.y + dy, b.w, b.h, rng.gen_range(0.4..1.0)).unwrap());
                }
            }
            for _ in 0..3 {
                let s = rng.gen_range(10.0..60.0);
                d.push(BBox::with_score(rng.gen_range(0.0..260.0), rng.gen_range(0.0..260.0), s, s, rng.gen_range(0.0..0.7)).unwrap());
            }
            d
        })
        .collect();

    let report = ap(&dets, &gts, 0.5);
    println!("AP {:.4}: {} gt, {} tp, {} fp", report.ap, report.num_gt, report.true_positives, report.false_positives);

    let diag = diagnose(&dets, &gts, 0.5, 5);
    println!("false positives: {} background, {} localization", diag.background, diag.localization);
    for f in &diag.top {
        println!("  image {} score {:.3} ov {:.2} {}", f.image, f.score, f.ov, f.mode.as_str());
    }

    let heights = Characteristic::height(&gts, &[20.0, 40.0, 140.0]);
    let s = sensitivity(&dets, &gts, &heights, 0.5, None);
    for b in &s.bins {
        println!("height {:>10}: {:3} objects, normalized AP {:.3}", b.label, b.num_gt, b.normalized_ap);
    }

    let regions: Vec<Vec<Region>> = dets.iter().map(|d| d.iter().map(|b| Region::Box(*b)).collect()).collect();
    let ellipses: Vec<Vec<_>> = images.iter().map(|t| t.boxes.iter().map(box_to_ellipse).collect()).collect();
    for continuous in [false, true] {
        let c = fddb_curve(&regions, &ellipses, continuous);
        println!("FDDB {}: rate {:.3} at 100 false positives", if continuous { "continuous" } else { "discrete" }, c.rate_at(100));
    }
    Ok(())
}
