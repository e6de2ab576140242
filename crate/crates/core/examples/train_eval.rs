//! Trains the tiny model on synthetic triplets and scores held-out frames.
//!
//! cargo run --release --example train_eval -- [epochs] [train_count] [full|no-trans]

use std::time::Instant;

use monovit::eval::evaluate_triplets;
use monovit::metrics::{format_table, MetricsReport};
use monovit::model::ModelConfig;
use monovit::synth::{make_dataset, DatasetConfig};
use monovit::train::{TrainConfig, Trainer};

fn main() -> monovit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: u64 = args.first().map_or(10, |s| s.parse().expect("epochs"));
    let count: usize = args.get(1).map_or(50, |s| s.parse().expect("train_count"));
    let variant = args.get(2).map_or("full", String::as_str);

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

    let mut model = ModelConfig::tiny();
    model.encoder.input_size = (96, 96);
    if variant == "no-trans" {
        model.encoder.num_transformer_paths = 0;
    }
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let range = cfg.loss.range;
    let mut trainer = Trainer::new(&model, cfg)?;
    println!("{variant}: {} parameters", trainer.model.num_parameters());

    let start = Instant::now();
    for _ in 0..epochs {
        let mut sum = 0.0;
        let mut n = 0;
        trainer.run_epoch(&train, |_, r| {
            sum += r.total;
            n += 1;
            Ok(())
        })?;
        let reports = evaluate_triplets(&trainer.model, &held_out, range, range)?;
        let m = MetricsReport::mean(&reports)?;
        println!(
            "epoch {:2}  loss {:.5}  abs_rel {:.4}  d1 {:.3}  {:.0}s",
            trainer.epoch,
            sum / n as f64,
            m.abs_rel,
            m.delta1,
            start.elapsed().as_secs_f64()
        );
    }
    let reports = evaluate_triplets(&trainer.model, &held_out, range, range)?;
    print!(
        "{}",
        format_table(&[("held-out".into(), MetricsReport::mean(&reports)?)])
    );
    Ok(())
}
