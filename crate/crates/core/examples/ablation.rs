//! Trains the baseline and the variants without the fine tap, without the
//! coarse tap and with the unpruned bank on the same synthetic splits.
//!
//! `cargo run --release --example ablation -- [epochs]`

use tinyface::dataset::SyntheticSpec;
use tinyface::experiment::{ablate, ablation_csv, synthetic_splits, ExperimentConfig, Variant};
use tinyface::training::TrainConfig;

fn main() -> tinyface::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epochs must be an integer"));
    let splits = synthetic_splits(&SyntheticSpec::default(), 60, 10, 20)?;
    let cfg = ExperimentConfig { train: TrainConfig { epochs, crop: 128, ..TrainConfig::default() }, ..Default::default() };
    let base = Variant::baseline();
    let variants = [
        base.clone(),
        Variant { name: "no_fine_tap".into(), fine_tap: false, ..base.clone() },
        Variant { name: "no_coarse_tap".into(), coarse_tap: false, ..base.clone() },
        Variant { name: "full_bank".into(), prune: false, ..base },
    ];
    let rows = ablate(&splits, &cfg, &variants)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
