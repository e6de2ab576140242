//! The `monovit` command line. Exit codes: 0 success, 1 usage or config
//! error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::batch::Batch;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{as_batch, evaluate_triplets};
use crate::gradcheck::{fault_kind, run_suite, DEFAULT_TRIALS};
use crate::io::{load_dataset, read_ppm, save_dataset, write_pfm, write_pgm};
use crate::metrics::{evaluate_depth, format_table, MetricsReport};
use crate::synth::{make_dataset, DatasetConfig};
use crate::train::{fit, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "monovit",
    version,
    about = "Self-supervised monocular depth on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic triplet dataset.
    Gen(GenArgs),
    /// Train from a run config.
    Train(TrainArgs),
    /// Median-scaled depth metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Disparity map (and optional per-stage activation maps) for one image.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
    /// Training throughput and parameter count of a config.
    Bench(BenchArgs),
    /// Print the documented default run config.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of triplets.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HxW.
    #[arg(long, default_value = "96x96", value_parser = parse_size)]
    size: (usize, usize),
    /// Camera travel per frame.
    #[arg(long, default_value_t = 0.3)]
    motion: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint; overrides `train.resume`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "gt_as_pred")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Also write per-image metrics and the mean row as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Score ground truth against itself.
    #[arg(long, hide = true)]
    gt_as_pred: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM image of the model's input size.
    #[arg(long)]
    image: PathBuf,
    /// Disparity output (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Directory for one activation-map PGM per encoder stage.
    #[arg(long)]
    attn: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Flip the sign of one primitive's backward pass.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let p = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("bad size component {v:?}"))
    };
    Ok((p(h)?, p(w)?))
}

/// Runs the command line in `args` (program name first) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default_text());
            Ok(())
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        seed: a.seed,
        count: a.n,
        height: a.size.0,
        width: a.size.1,
        motion: a.motion,
        ..DatasetConfig::default()
    };
    cfg.validate()?;
    let triplets = make_dataset(&cfg)?;
    save_dataset(&a.out, &cfg, &triplets)?;
    println!(
        "wrote {} triplets ({}x{}) to {}",
        triplets.len(),
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if a.resume.is_some() {
        cfg.resume = a.resume;
    }
    let s = fit(
        &cfg.train,
        &cfg.model,
        &cfg.data,
        &cfg.out,
        cfg.resume.as_deref(),
    )?;
    if let Some(r) = &s.last {
        println!(
            "last loss {:.6} (photometric {:.6}, smoothness {:.6})",
            r.total, r.photometric, r.smoothness
        );
    }
    println!("{} steps, {} epochs", s.steps, s.epochs);
    println!("log: {}", s.log.display());
    println!("checkpoint: {}", s.checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let range = data.manifest.range;
    let reports = match &a.ckpt {
        Some(path) if !a.gt_as_pred => {
            let ck = Checkpoint::load(path)?;
            let (h, w) = ck.model.encoder.input_size;
            if (data.manifest.height, data.manifest.width) != (h, w) {
                return Err(Error::shape(
                    "eval",
                    format!(
                        "model expects {h}x{w} images, dataset has {}x{}",
                        data.manifest.height, data.manifest.width
                    ),
                ));
            }
            evaluate_triplets(&ck.build_model()?, &data.triplets, ck.range, range)?
        }
        _ => data
            .triplets
            .iter()
            .map(|t| evaluate_depth(t.depth.data(), t.depth.data(), range))
            .collect::<Result<_>>()?,
    };
    let mut rows: Vec<(String, MetricsReport)> = data
        .manifest
        .triplets
        .iter()
        .zip(&reports)
        .map(|(f, r)| (f.target.trim_end_matches(".ppm").to_string(), *r))
        .collect();
    rows.push(("mean".into(), MetricsReport::mean(&reports)?));
    print!("{}", format_table(&rows));
    if let Some(path) = &a.csv {
        let mut s = MetricsReport::csv_header() + "\n";
        for (label, r) in &rows {
            s += &(r.csv_row(label) + "\n");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.build_model()?;
    let image = as_batch(&read_ppm(&a.image)?)?;
    let (h, w) = model.cfg.encoder.input_size;
    if image.shape()[2..] != [h, w] {
        return Err(Error::shape(
            "infer",
            format!(
                "model expects {h}x{w} images, {} is {}x{}",
                a.image.display(),
                image.shape()[2],
                image.shape()[3]
            ),
        ));
    }
    let disp = model.predict(&image)?;
    write_pfm(&a.out, &disp)?;
    println!("disparity {}x{} -> {}", h, w, a.out.display());
    if let Some(dir) = &a.attn {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, map) in model.activation_maps(&image)?.iter().enumerate() {
            let path = dir.join(format!("stage_{}.pgm", i + 1));
            write_pgm(&path, map)?;
            println!(
                "stage {} {}x{} -> {}",
                i + 1,
                map.shape()[2],
                map.shape()[3],
                path.display()
            );
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let fault = match &a.inject_fault {
        Some(name) => {
            Some(fault_kind(name).ok_or_else(|| Error::invalid(format!("unknown op {name:?}")))?)
        }
        None => None,
    };
    let report = run_suite(a.seed, a.trials, fault)?;
    print!("{}", report.format_table());
    println!("{:.1}s", report.elapsed.as_secs_f64());
    report.into_result().map(|_| ())
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (h, w) = cfg.model.encoder.input_size;
    let data = DatasetConfig {
        seed: cfg.train.seed,
        count: cfg.train.batch_size,
        height: h,
        width: w,
        ..DatasetConfig::default()
    };
    let triplets = make_dataset(&data)?;
    let ids: Vec<usize> = (0..triplets.len()).collect();
    let batch = Batch::new(&triplets, &ids)?;
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
    println!("parameters: {}", trainer.model.num_parameters());
    trainer.train_step(&batch)?;

    let mut rates = Vec::with_capacity(cfg.bench_trials);
    for _ in 0..cfg.bench_trials {
        let start = Instant::now();
        for _ in 0..cfg.bench_steps {
            trainer.train_step(&batch)?;
        }
        rates.push(cfg.bench_steps as f64 / start.elapsed().as_secs_f64());
    }
    let (m, s) = mean_std(&rates);
    let b = cfg.train.batch_size as f64;
    println!(
        "{} trials x {} steps, batch {}, {h}x{w}, {} thread(s)",
        cfg.bench_trials,
        cfg.bench_steps,
        cfg.train.batch_size,
        crate::tensor::threads()
    );
    println!("steps/sec:  {m:.4} +- {s:.4}");
    println!("images/sec: {:.4} +- {:.4}", m * b, s * b);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["monovit"]), 1);
        assert_eq!(run(["monovit", "gen", "--out", "x"]), 1);
        assert_eq!(
            run(["monovit", "gen", "--out", "x", "--n", "2", "--size", "64"]),
            1
        );
        assert_eq!(run(["monovit", "--help"]), 0);
        assert_eq!(
            run([
                "monovit",
                "gradcheck",
                "--inject-fault",
                "nosuchop",
                "--trials",
                "1"
            ]),
            1
        );
    }

    #[test]
    fn zero_triplets_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        assert_eq!(
            run(["monovit", "gen", "--n", "0", "--out", out.to_str().unwrap()]),
            1
        );
        assert!(!out.exists());
    }

    #[test]
    fn size_parser() {
        assert_eq!(parse_size("64x192"), Ok((64, 192)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax2").is_err());
    }

    #[test]
    fn spread() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
