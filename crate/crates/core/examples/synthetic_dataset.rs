//! Writes a synthetic dataset (PPM images plus manifest) and summarizes it.
//!
//! `cargo run --release --example synthetic_dataset -- [out_dir] [n]`

use tinyface::dataset::{generate_synthetic, Dataset, SyntheticSpec};

fn main() -> tinyface::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("tinyface_synthetic").display().to_string());
    let n: usize = args.next().map_or(20, |a| a.parse().expect("n must be an integer"));
    let spec = SyntheticSpec { seed: 7, ..SyntheticSpec::default() };
    generate_synthetic(&spec, n, &out)?;

    let data = Dataset::open(&out)?;
    let mut heights: Vec<f64> = data.manifest.images.iter().flat_map(|i| i.boxes.iter().map(|b| b.bbox.h)).collect();
    heights.sort_by(f64::total_cmp);
    println!("{} images, {} objects in {out}", data.len(), heights.len());
    if !heights.is_empty() {
        let q = |p: f64| heights[((heights.len() - 1) as f64 * p) as usize];
        println!("height quartiles {:.0} {:.0} {:.0} {:.0} {:.0}", q(0.0), q(0.25), q(0.5), q(0.75), q(1.0));
    }
    println!("mean rgb {:?}", data.manifest.mean_rgb());
    Ok(())
}
