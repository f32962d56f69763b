//! Renders seeded synthetic splits, builds the bank from the training shapes,
//! trains, detects on the test split and reports AP per height band.
//!
//! `cargo run --release --example end_to_end -- [key=value ...]` where keys
//! are training options plus `train`, `val`, `test` (split sizes), `objects`
//! (maximum per image), `k`, `full=true` and `drop=fine|coarse`.

use tinyface::config::KeyValues;
use tinyface::dataset::SyntheticSpec;
use tinyface::experiment::{run_experiment, synthetic_splits, ExperimentConfig};
use tinyface::net::TapKind;
use tinyface::training::TrainConfig;

const OWN_KEYS: [&str; 7] = ["train", "val", "test", "objects", "k", "full", "drop"];

fn main() -> tinyface::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kv = KeyValues::parse(&args.join("\n"), "args")?;
    let mut train_kv = KeyValues::default();
    for k in kv.keys().filter(|k| !OWN_KEYS.contains(k)) {
        train_kv.insert(k, kv.get(k).unwrap());
    }
    let mut cfg = ExperimentConfig { train: TrainConfig::from_kv(&train_kv)?, ..Default::default() };
    cfg.cluster.k = kv.parsed("k")?.unwrap_or(cfg.cluster.k);
    cfg.prune = !kv.parsed("full")?.unwrap_or(false);
    match kv.get("drop") {
        Some("fine") => cfg.net.set_tap_enabled(TapKind::Fine, false),
        Some("coarse") => cfg.net.set_tap_enabled(TapKind::Coarse, false),
        Some(other) => return Err(tinyface::Error::Config(format!("drop must be fine or coarse, got {other:?}"))),
        None => {}
    }
    let spec = SyntheticSpec { max_objects: kv.parsed("objects")?.unwrap_or(5), ..SyntheticSpec::default() };
    let splits = synthetic_splits(
        &spec,
        kv.parsed("train")?.unwrap_or(200),
        kv.parsed("val")?.unwrap_or(20),
        kv.parsed("test")?.unwrap_or(50),
    )?;

    let run = run_experiment(&splits, &cfg)?;
    let r = &run.report;
    println!("{} templates, trained in {:.0}s, best epoch {}", r.templates, r.train_seconds, r.best_epoch);
    for m in &r.metrics {
        println!("epoch {:3} cls {:.5} reg {:.5} val {:?}", m.epoch, m.cls_loss, m.reg_loss, m.val_ap);
    }
    println!("test AP {:.4} (detection {:.1}s)", r.ap, r.detect_seconds);
    for b in &r.bands {
        println!("  height [{}, {}): {} objects, AP {:.4}", b.min_h, b.max_h, b.num_gt, b.ap);
    }
    Ok(())
}
