//! Trains a small model on synthetic data and saves the checkpoint, the bank
//! and a few test images for the `detect` example.
//!
//! `cargo run --release --example train_model -- [out_dir] [key=value ...]`
//! where keys are training options such as `epochs=20` or `crop=128`.

use std::path::PathBuf;

use tinyface::config::KeyValues;
use tinyface::dataset::SyntheticSpec;
use tinyface::experiment::{bank_for, mean_rgb, synthetic_splits};
use tinyface::net::{save_checkpoint, NetConfig};
use tinyface::pyramid::write_ppm;
use tinyface::training::{metrics_csv, train, TrainConfig, TrainOptions};

fn main() -> tinyface::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let out = match args.peek() {
        Some(a) if !a.contains('=') => PathBuf::from(args.next().unwrap()),
        _ => std::env::temp_dir().join("tinyface_model"),
    };
    let overrides: Vec<String> = args.collect();
    let base = TrainConfig { epochs: 10, crop: 128, ..TrainConfig::default() };
    let mut kv = KeyValues::parse(&base.to_text(), "defaults")?;
    let user = KeyValues::parse(&overrides.join("\n"), "args")?;
    for k in user.keys() {
        kv.insert(k, user.get(k).unwrap());
    }
    let cfg = TrainConfig::from_kv(&kv)?;

    let spec = SyntheticSpec { max_height: 160.0, ..SyntheticSpec::default() };
    let splits = synthetic_splits(&spec, 60, 10, 5)?;
    let bank = bank_for(&splits.train, &Default::default(), true)?;
    let net_cfg = NetConfig { mean_rgb: mean_rgb(&splits.train), ..NetConfig::default() };
    println!("training {} epochs on {} images with {} templates", cfg.epochs, splits.train.len(), bank.len());
    let outcome = train(&splits.train, &splits.validation, &bank, &net_cfg, &cfg, &TrainOptions::default())?;
    print!("{}", metrics_csv(&outcome.metrics));
    println!("selected epoch {}", outcome.best_epoch);

    std::fs::create_dir_all(&out).map_err(|source| tinyface::Error::Io { path: out.clone(), source })?;
    save_checkpoint(&outcome.net, out.join("model.ckpt"))?;
    std::fs::write(out.join("bank.csv"), bank.to_csv()).map_err(|source| tinyface::Error::Io { path: out.clone(), source })?;
    for (i, t) in splits.test.iter().enumerate() {
        write_ppm(&t.image, out.join(format!("test_{i}.ppm")))?;
    }
    println!("written to {}", out.display());
    Ok(())
}
