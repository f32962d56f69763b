//! Runs a saved model on images and prints the detections.
//!
//! `cargo run --release --example detect -- [model_dir] [image.ppm ...]`
//! The model directory defaults to the output of the `train_model` example;
//! without images, its `test_*.ppm` files are used.

use std::path::PathBuf;

use tinyface::bank::TemplateBank;
use tinyface::inference::{detect, format_detections, DetectConfig};
use tinyface::net::{load_checkpoint, FeatureNet};
use tinyface::pyramid::read_image;

fn main() -> tinyface::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| std::env::temp_dir().join("tinyface_model"), PathBuf::from);
    let mut images: Vec<PathBuf> = args.map(PathBuf::from).collect();
    if images.is_empty() {
        images = (0..).map(|i| dir.join(format!("test_{i}.ppm"))).take_while(|p| p.exists()).collect();
    }
    let net: FeatureNet<f32> = load_checkpoint(dir.join("model.ckpt"))?;
    let bank_path = dir.join("bank.csv");
    let text = std::fs::read_to_string(&bank_path).map_err(|source| tinyface::Error::Io { path: bank_path.clone(), source })?;
    let bank = TemplateBank::from_csv(&text, &bank_path.display().to_string())?;
    let cfg = DetectConfig::default();
    for path in images {
        let img = read_image(&path)?;
        let t = std::time::Instant::now();
        let dets = detect(&net, &bank, &img, &cfg)?;
        println!("{}: {} detections in {:?}", path.display(), dets.len(), t.elapsed());
        print!("{}", format_detections(&dets));
    }
    Ok(())
}
