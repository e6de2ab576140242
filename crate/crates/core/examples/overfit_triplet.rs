//! Fits the tiny model to a single synthetic triplet and prints the loss.
//!
//! cargo run --release --example overfit_triplet -- [steps] [seed] [side]

use std::time::Instant;

use monovit::batch::Batch;
use monovit::model::ModelConfig;
use monovit::synth::{make_dataset, DatasetConfig};
use monovit::train::{TrainConfig, Trainer};

fn main() -> monovit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(500, |s| s.parse().expect("steps"));
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let side: usize = args.get(2).map_or(96, |s| s.parse().expect("side"));

    let data = DatasetConfig {
        count: 1,
        seed,
        height: side,
        width: side,
        ..DatasetConfig::default()
    };
    let triplets = make_dataset(&data)?;
    let mut model = ModelConfig::tiny();
    model.encoder.input_size = (data.height, data.width);
    let mut trainer = Trainer::new(
        &model,
        TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )?;
    println!("parameters: {}", trainer.model.num_parameters());

    let batch = Batch::new(&triplets, &[0])?;
    let start = Instant::now();
    let mut first = None;
    for step in 0..steps {
        let r = trainer.train_step(&batch)?;
        let first = *first.get_or_insert(r.total);
        if step % 25 == 0 || step + 1 == steps {
            println!(
                "step {step:4}  loss {:.5}  ratio {:.3}  automask {:.3}  {:.1}s",
                r.total,
                r.total / first,
                r.automask_ratio,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let last = trainer.evaluate_loss(&batch)?;
    println!(
        "final loss {:.5} ({:.1}% of step 0)",
        last.total,
        100.0 * last.total / first.unwrap_or(1.0)
    );
    Ok(())
}
