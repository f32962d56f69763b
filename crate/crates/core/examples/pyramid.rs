//! Builds the 0.5x / 1x / 2x pyramid of a synthetic image and cuts a padded
//! training crop, writing everything as PPM files.
//!
//! `cargo run --release --example pyramid -- [out_dir]`

use std::path::PathBuf;

use tinyface::bank::PYRAMID_SCALES;
use tinyface::dataset::{render_synthetic, SyntheticSpec};
use tinyface::pyramid::{build_pyramid, pad_crop, write_ppm};

fn main() -> tinyface::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tinyface_pyramid"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|source| tinyface::Error::Io { path: out.clone(), source })?;
    let img = render_synthetic(&SyntheticSpec::default(), 0)?.raster;
    let pyramid = build_pyramid(&img, &PYRAMID_SCALES)?;
    for (scale, level) in &pyramid.levels {
        println!("{scale}x: {}x{}", level.width(), level.height());
        write_ppm(level, out.join(format!("level_{scale}.ppm")))?;
    }
    let mean = img.mean_rgb().map(|v| v as f32);
    let crop = pad_crop(&img, -64, 200, 256, mean)?;
    println!("crop at (-64, 200): {} of {} pixels padded", crop.filled_pixels(), 256 * 256);
    write_ppm(&crop.raster, out.join("crop.ppm"))?;
    println!("written to {}", out.display());
    Ok(())
}
