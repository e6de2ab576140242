//! Encoder ablations trained with identical data, seed and steps.
//!
//! cargo run --release --example ablation -- [epochs] [train_count]

use monovit::eval::evaluate_triplets;
use monovit::metrics::{format_table, MetricsReport};
use monovit::model::ModelConfig;
use monovit::synth::{make_dataset, DatasetConfig};
use monovit::train::{TrainConfig, Trainer};

fn main() -> monovit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: u64 = args.first().map_or(3, |s| s.parse().expect("epochs"));
    let count: usize = args.get(1).map_or(20, |s| s.parse().expect("train_count"));
    let train = make_dataset(&DatasetConfig {
        count,
        seed: 0,
        ..DatasetConfig::default()
    })?;
    let held_out = make_dataset(&DatasetConfig {
        count: 10,
        seed: 1,
        ..DatasetConfig::default()
    })?;

    let mut base = ModelConfig::tiny();
    base.encoder.input_size = (96, 96);
    let variants: [(&str, fn(&mut ModelConfig)); 4] = [
        ("full", |_| {}),
        ("w/o trans. path", |c| c.encoder.num_transformer_paths = 0),
        ("w/o conv path", |c| c.encoder.use_conv_path = false),
        ("w/o decoder attn", |c| c.decoder_attention = false),
    ];
    let mut rows = Vec::new();
    for (name, edit) in variants {
        let mut cfg = base.clone();
        edit(&mut cfg);
        let tc = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        let range = tc.loss.range;
        let mut trainer = Trainer::new(&cfg, tc)?;
        for _ in 0..epochs {
            trainer.run_epoch(&train, |_, _| Ok(()))?;
        }
        let m = MetricsReport::mean(&evaluate_triplets(&trainer.model, &held_out, range, range)?)?;
        println!(
            "{name}: {} parameters, abs_rel {:.4}",
            trainer.model.num_parameters(),
            m.abs_rel
        );
        rows.push((name.to_string(), m));
    }
    print!("{}", format_table(&rows));
    Ok(())
}
