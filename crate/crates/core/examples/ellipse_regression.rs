//! Fits the box-to-ellipse regressor on simulated detections whose
//! descriptors carry a noisy linear trace of the true ellipse.
//!
//! `cargo run --release --example ellipse_regression`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyface::dataset::AnnotatedImage;
use tinyface::ellipse::{fit, fit_report, training_pairs, CV_FOLDS, DEFAULT_RIDGE};
use tinyface::geometry::{BBox, Ellipse};
use tinyface::inference::FeatureRecord;

const DIM: usize = 16;

fn main() -> tinyface::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gts = Vec::new();
    let mut records = Vec::new();
    for i in 0..100 {
        let name = format!("img_{i:03}");
        let mut ellipses = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let rb = rng.gen_range(8.0..60.0);
            let e = Ellipse::new(
                rng.gen_range(50.0..250.0),
                rng.gen_range(50.0..250.0),
                rb * rng.gen_range(1.1..1.5),
                rb,
                rng.gen_range(1.3..1.85),
            )?;
            // a detection close to the ellipse's bounding box
            let bb = e.bounding_box();
            let j = 0.05 * bb.w;
            let det = BBox::with_score(bb.x + rng.gen_range(-j..j), bb.y + rng.gen_range(-j..j), bb.w, bb.h, 0.9)?;
            let t = tinyface::ellipse::encode(&det, &e)?.to_array();
            let features = (0..DIM)
                .map(|k| if k < 5 { t[k] + rng.gen_range(-0.02..0.02) } else { rng.gen_range(-1.0..1.0) } as f32)
                .collect();
            records.push(FeatureRecord { image: format!("{name}.ppm"), bbox: det, features });
            ellipses.push(e);
        }
        gts.push(AnnotatedImage { path: format!("{name}.jpg"), boxes: Vec::new(), ellipses });
    }

    let pairs = training_pairs(&records, &gts, 0.5);
    println!("{} pairs, {} unmatched, {} undefined angles", pairs.targets.len(), pairs.unmatched, pairs.degenerate);
    let result = fit(&pairs.features, &pairs.targets, DEFAULT_RIDGE, CV_FOLDS, "simulated")?;
    print!("{}", fit_report(&result));
    let r = &records[0];
    println!("first detection {:?}\n  -> {:?}", r.bbox, result.model.predict(&r.bbox, &pairs.features[0])?);
    Ok(())
}
