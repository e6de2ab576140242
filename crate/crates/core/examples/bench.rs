//! Forward and training-step timing plus parameter counts of the presets.
//!
//! cargo run --release --example bench -- [trials]

use std::time::Instant;

use monovit::batch::Batch;
use monovit::encoder::EncoderConfig;
use monovit::model::{ModelConfig, MonoVit};
use monovit::synth::{make_dataset, DatasetConfig};
use monovit::train::{TrainConfig, Trainer};

fn main() -> monovit::Result<()> {
    let trials: usize = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("trials"));
    for (name, enc) in [
        ("tiny", EncoderConfig::tiny()),
        ("default", EncoderConfig::default()),
        ("deep blocks", EncoderConfig::deep_blocks()),
    ] {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_size: (96, 96),
                ..enc
            },
            decoder_attention: true,
        };
        println!(
            "{name:>12}: {:>9} parameters",
            MonoVit::new(&cfg, 0)?.num_parameters()
        );
    }

    let mut cfg = ModelConfig::tiny();
    cfg.encoder.input_size = (96, 96);
    let ts = make_dataset(&DatasetConfig {
        count: 2,
        ..DatasetConfig::default()
    })?;
    let batch = Batch::new(&ts, &[0, 1])?;
    let mut trainer = Trainer::new(&cfg, TrainConfig::default())?;
    trainer.train_step(&batch)?;
    let mut fwd = Vec::new();
    let mut step = Vec::new();
    for _ in 0..trials {
        let s = Instant::now();
        trainer.model.predict(&batch.target)?;
        fwd.push(s.elapsed().as_secs_f64());
        let s = Instant::now();
        trainer.train_step(&batch)?;
        step.push(s.elapsed().as_secs_f64());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "tiny 96x96, batch 2, {} thread(s):",
        monovit::tensor::threads()
    );
    println!(
        "  depth forward {:.3} s ({:.1} images/s)",
        mean(&fwd),
        2.0 / mean(&fwd)
    );
    println!(
        "  training step {:.3} s ({:.2} images/s)",
        mean(&step),
        2.0 / mean(&step)
    );
    Ok(())
}
