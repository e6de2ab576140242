//! Training loop: one optimizer step per batch, deterministic epoch order,
//! CSV loss log and periodic checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::Batch;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::io::load_dataset;
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::model::{ModelConfig, MonoVit};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::synth::Triplet;
use crate::tensor::Tape;

pub const LOG_HEADER: &str =
    "step,total,per_scale_1,per_scale_2,per_scale_3,per_scale_4,photometric,smoothness,automask_ratio";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Learning rate of the pose network and the depth decoder.
    pub lr_posenet_decoder: f64,
    /// Learning rate of the depth encoder; at most `lr_posenet_decoder`.
    pub lr_encoder: f64,
    pub weight_decay: f64,
    /// Seeds weight initialization and the per-epoch data order.
    pub seed: u64,
    pub loss: LossConfig,
    /// Global gradient norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write `epoch_NNN.ckpt` every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            lr_posenet_decoder: 1e-4,
            lr_encoder: 5e-5,
            weight_decay: 1e-2,
            seed: 0,
            loss: LossConfig::default(),
            grad_clip: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| v.is_finite() && v >= 0.0;
        if !rate(self.lr_encoder) || !rate(self.lr_posenet_decoder) || !rate(self.weight_decay) {
            return Err(Error::Config(
                "learning rates and weight decay must be finite and >= 0".into(),
            ));
        }
        if self.lr_encoder > self.lr_posenet_decoder {
            return Err(Error::Config(format!(
                "lr_encoder ({}) must not exceed lr_posenet_decoder ({})",
                self.lr_encoder, self.lr_posenet_decoder
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.loss
            .range
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

pub fn log_row(step: u64, r: &LossReport) -> String {
    let mut s = format!("{step},{}", r.total);
    for v in &r.per_scale {
        s += &format!(",{v}");
    }
    s + &format!(",{},{},{}", r.photometric, r.smoothness, r.automask_ratio)
}

pub struct Trainer {
    pub model: MonoVit,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MonoVit::new(model_cfg, cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer(), &model.params);
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: 0,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint; moments restart at zero if it has none.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ck.build_model()?;
        let mut opt = ck
            .optimizer
            .clone()
            .unwrap_or_else(|| AdamW::new(cfg.optimizer(), &model.params));
        opt.cfg.weight_decay = cfg.weight_decay;
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: ck.step,
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            Some(&self.opt),
            self.cfg.loss.range,
            self.step,
            self.epoch,
        )
    }

    /// Loss of `batch` under the current weights, without updating them.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossReport> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, false);
        let (_, report) = self.forward(&tape, &p, batch)?;
        Ok(report)
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &crate::nn::Bound<'t>,
        batch: &Batch,
    ) -> Result<(crate::tensor::Var<'t>, LossReport)> {
        let m = &self.model;
        let target = tape.constant(batch.target.clone());
        let disps = m.depth(p, target)?;
        let fwd = m.pose(p, target, tape.constant(batch.src_fwd.clone()))?;
        let bwd = m.pose(p, target, tape.constant(batch.src_bwd.clone()))?;
        let views = batch.views(tape, [fwd, bwd]);
        total_loss(&disps, &views, &self.cfg.loss)
    }

    /// Forward, backward and one AdamW update. The report describes the
    /// loss before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let (loss, report) = self.forward(&tape, &p, batch)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: batch.ids.clone(),
            });
        }
        let mut grads = tape.backward(loss)?;
        let params = &mut self.model.params;
        params.store_grads(&p, &mut grads)?;
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(params, c)?;
        }
        let (enc, rest) = (self.cfg.lr_encoder, self.cfg.lr_posenet_decoder);
        self.opt.update(params, |name| {
            if name.starts_with("encoder.") {
                enc
            } else {
                rest
            }
        })?;
        params.zero_grads();
        self.step += 1;
        Ok(report)
    }

    /// Triplet order of epoch `epoch`; depends only on the seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `triplets` in shuffled batches. `on_step` sees the
    /// pre-update step index and report.
    pub fn run_epoch(
        &mut self,
        triplets: &[Triplet],
        mut on_step: impl FnMut(u64, &LossReport) -> Result<()>,
    ) -> Result<()> {
        let order = self.epoch_order(triplets.len(), self.epoch);
        for ids in order.chunks(self.cfg.batch_size) {
            let batch = Batch::new(triplets, ids)?;
            let step = self.step;
            let report = self.train_step(&batch)?;
            on_step(step, &report)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub last: Option<LossReport>,
}

/// Trains on the dataset in `data` until `cfg.epochs` epochs are complete,
/// writing the log and checkpoints into `out`. With `resume`, weights,
/// moments and counters come from that checkpoint and the log is appended.
pub fn fit(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    cfg.validate()?;
    let dataset = load_dataset(data)?;
    let (h, w) = model_cfg.encoder.input_size;
    if (dataset.manifest.height, dataset.manifest.width) != (h, w) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the model expects {h}x{w}",
            dataset.manifest.height, dataset.manifest.width
        )));
    }
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model != *model_cfg {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            Trainer::resume(&ck, cfg.clone())?
        }
        None => Trainer::new(model_cfg, cfg.clone())?,
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let append = resume.is_some() && log_path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io_err = |e| Error::io(&log_path, e);
    if !append {
        writeln!(log, "{LOG_HEADER}").map_err(io_err)?;
    }

    let mut last = None;
    while trainer.epoch < cfg.epochs {
        trainer.run_epoch(&dataset.triplets, |step, r| {
            last = Some(r.clone());
            writeln!(log, "{}", log_row(step, r)).map_err(io_err)
        })?;
        log.flush().map_err(io_err)?;
        if cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&out.join(format!("epoch_{:03}.ckpt", trainer.epoch)))?;
        }
    }
    log.flush().map_err(io_err)?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(FitSummary {
        checkpoint,
        log: log_path,
        steps: trainer.step,
        epochs: trainer.epoch,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DatasetConfig};

    fn setup() -> (ModelConfig, Vec<Triplet>) {
        let mut m = ModelConfig::tiny();
        m.encoder.input_size = (32, 32);
        let d = DatasetConfig {
            count: 3,
            height: 32,
            width: 32,
            ..DatasetConfig::default()
        };
        (m, make_dataset(&d).unwrap())
    }

    #[test]
    fn zero_rate_repeats_the_report() {
        let (m, ts) = setup();
        let cfg = TrainConfig {
            lr_encoder: 0.0,
            lr_posenet_decoder: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&m, cfg).unwrap();
        let b = Batch::new(&ts, &[0, 1]).unwrap();
        let a = t.train_step(&b).unwrap();
        let c = t.train_step(&b).unwrap();
        assert_eq!(a, c);
        assert_eq!(t.step, 2);
    }

    #[test]
    fn clip_at_infinity_matches_no_clip() {
        let (m, ts) = setup();
        let b = Batch::new(&ts, &[2]).unwrap();
        let mut a = Trainer::new(&m, TrainConfig::default()).unwrap();
        let mut c = Trainer::new(
            &m,
            TrainConfig {
                grad_clip: Some(f64::INFINITY),
                ..TrainConfig::default()
            },
        )
        .unwrap();
        a.train_step(&b).unwrap();
        c.train_step(&b).unwrap();
        assert_eq!(a.checkpoint().to_bytes(), c.checkpoint().to_bytes());
    }

    #[test]
    fn encoder_rate_is_separate() {
        let (m, ts) = setup();
        let cfg = TrainConfig {
            lr_encoder: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&m, cfg).unwrap();
        let before = t.model.params.clone();
        t.train_step(&Batch::new(&ts, &[0]).unwrap()).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
            if name.starts_with("encoder.") {
                assert_eq!(a.data(), b.data(), "{name}");
            }
        }
        let moved = before
            .iter()
            .zip(t.model.params.iter())
            .filter(|((n, a), (_, b))| !n.starts_with("encoder.") && a.data() != b.data())
            .count();
        assert!(moved > 0);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let (m, _) = setup();
        let t = Trainer::new(&m, TrainConfig::default()).unwrap();
        let a = t.epoch_order(10, 0);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, t.epoch_order(10, 0));
        assert_ne!(a, t.epoch_order(10, 1));
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            lr_encoder: 1e-3,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_row_has_header_width() {
        let r = LossReport {
            total: 1.0,
            per_scale: vec![1.0; 4],
            photometric: 0.5,
            smoothness: 0.25,
            automask_ratio: 0.75,
        };
        assert_eq!(
            log_row(3, &r).split(',').count(),
            LOG_HEADER.split(',').count()
        );
    }
}
