//! Clusters the box shapes of a synthetic training set and prints the full
//! and pruned template banks.
//!
//! `cargo run --release --example templates -- [k]`

use tinyface::bank::{build_bank, TemplateBank};
use tinyface::clustering::{cluster_shapes, ShapeClusterConfig};
use tinyface::dataset::SyntheticSpec;
use tinyface::experiment::render_split;
use tinyface::geometry::BBox;

fn show(name: &str, bank: &TemplateBank) {
    println!("{name}: {} templates", bank.len());
    for t in &bank.templates {
        println!(
            "  ch {:2} set {} target {:6.1}x{:<6.1} sigma {:3} canonical {:6.1}x{:.1}",
            t.channel,
            t.set.as_str(),
            t.target_h,
            t.target_w,
            t.sigma,
            t.canonical_h,
            t.canonical_w
        );
    }
}

fn main() -> tinyface::Result<()> {
    let k = std::env::args().nth(1).map_or(Ok(25), |a| a.parse()).expect("k must be an integer");
    let images = render_split(&SyntheticSpec::default(), 200)?;
    let shapes: Vec<_> = images.iter().flat_map(|t| t.boxes.iter().map(BBox::shape)).collect();
    let canon = cluster_shapes(&shapes, &ShapeClusterConfig { k, ..Default::default() })?;
    println!("{} boxes -> {} canonical shapes in {} iterations", shapes.len(), canon.len(), canon.iterations);
    println!("objective per iteration: {:?}", canon.objective_trace);

    show("full", &build_bank(&canon, false)?);
    let pruned = build_bank(&canon, true)?;
    show("pruned", &pruned);
    for d in &pruned.dropped {
        println!("  dropped {:.1}x{:.1}: channel {} at {}x", d.target.h, d.target.w, d.covered_by, d.scale);
    }
    Ok(())
}
