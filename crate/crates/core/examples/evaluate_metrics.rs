//! Depth metrics of noisy, rescaled predictions against ground truth.
//!
//! cargo run --release --example evaluate_metrics

use monovit::geometry::DepthRange;
use monovit::metrics::{evaluate_depth, format_table};
use monovit::synth::{make_dataset, DatasetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> monovit::Result<()> {
    let t = make_dataset(&DatasetConfig {
        count: 1,
        ..DatasetConfig::default()
    })?
    .remove(0);
    let gt = t.depth.data();
    let range = DepthRange::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for (label, noise, scale) in [
        ("exact", 0.0, 1.0),
        ("scaled x3", 0.0, 3.0),
        ("5% noise", 0.05, 1.0),
        ("20% noise", 0.2, 0.5),
    ] {
        let pred: Vec<f64> = gt
            .iter()
            .map(|g| scale * g * (1.0 + rng.gen_range(-noise..=noise)))
            .collect();
        rows.push((label.to_string(), evaluate_depth(&pred, gt, range)?));
    }
    print!("{}", format_table(&rows));
    Ok(())
}
