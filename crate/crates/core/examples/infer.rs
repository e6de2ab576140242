//! Disparity and per-stage activation maps for one synthetic frame.
//!
//! cargo run --release --example infer -- [checkpoint] [out_dir]
//!
//! Without a checkpoint (or with an empty one) the model is freshly initialized.

use std::path::{Path, PathBuf};

use monovit::checkpoint::Checkpoint;
use monovit::io::{write_pfm, write_pgm, write_ppm};
use monovit::model::{ModelConfig, MonoVit};
use monovit::synth::{make_dataset, DatasetConfig};

fn main() -> monovit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(p) if !p.is_empty() => Checkpoint::load(Path::new(p))?.build_model()?,
        _ => {
            let mut cfg = ModelConfig::tiny();
            cfg.encoder.input_size = (96, 96);
            MonoVit::new(&cfg, 0)?
        }
    };
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "infer".into()));
    std::fs::create_dir_all(&out).map_err(|e| monovit::Error::Io {
        path: out.clone(),
        source: e,
    })?;

    let (h, w) = model.cfg.encoder.input_size;
    let t = make_dataset(&DatasetConfig {
        count: 1,
        height: h,
        width: w,
        ..DatasetConfig::default()
    })?
    .remove(0);
    let image = t.target.reshaped(&[1, 3, h, w])?;
    let disp = model.predict(&image)?;
    write_ppm(&out.join("image.ppm"), &t.target)?;
    write_pfm(&out.join("disparity.pfm"), &disp)?;
    write_pgm(&out.join("disparity.pgm"), &disp)?;
    for (i, m) in model.activation_maps(&image)?.iter().enumerate() {
        write_pgm(&out.join(format!("stage_{}.pgm", i + 1)), m)?;
        println!("stage {}: {}x{}", i + 1, m.shape()[2], m.shape()[3]);
    }
    let d = disp.data();
    println!(
        "disparity {}x{} in [{:.4}, {:.4}]",
        w,
        h,
        d.iter().copied().fold(1.0, f64::min),
        d.iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}
