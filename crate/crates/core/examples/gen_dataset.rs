//! Renders a synthetic dataset to disk and loads it back.
//!
//! cargo run --release --example gen_dataset -- <out_dir> [count] [seed]

use std::path::PathBuf;

use monovit::batch::motion_magnitude;
use monovit::io::{load_dataset, save_dataset};
use monovit::synth::{make_dataset, DatasetConfig};

fn main() -> monovit::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let count = args.next().map_or(4, |s| s.parse().expect("count"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = DatasetConfig {
        count,
        seed,
        ..DatasetConfig::default()
    };
    let triplets = make_dataset(&cfg)?;
    save_dataset(&out, &cfg, &triplets)?;

    let back = load_dataset(&out)?;
    println!(
        "{} triplets at {}x{} in {}",
        back.triplets.len(),
        cfg.height,
        cfg.width,
        out.display()
    );
    for (i, t) in back.triplets.iter().enumerate() {
        let d = t.depth.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(0.0, f64::max);
        println!(
            "  {i:03}: depth {lo:.2}..{hi:.2}, motion {:.3}",
            motion_magnitude(t)
        );
    }
    Ok(())
}
