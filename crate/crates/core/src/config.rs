//! Run configuration: a text file of `[section]` headers and `key = value`
//! lines. `#` starts a comment line. Every key is optional; [`KEYS`] lists
//! them with their defaults. Unknown sections or keys are errors. Relative
//! paths are resolved against the directory holding the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::DepthRange;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(
    section: &'static str,
    name: &'static str,
    default: &'static str,
    doc: &'static str,
) -> Key {
    Key {
        section,
        name,
        default,
        doc,
    }
}

pub const KEYS: &[Key] = &[
    key("data", "path", "data", "training dataset directory"),
    key(
        "model",
        "stage_channels",
        "32,48,64,96,128",
        "channels of the stem and stages 2-5",
    ),
    key(
        "model",
        "layers_per_stage",
        "1,1,1,1",
        "transformer layers per branch in stages 2-5",
    ),
    key(
        "model",
        "transformer_paths",
        "3",
        "transformer branches per stage, 0-3",
    ),
    key(
        "model",
        "conv_path",
        "true",
        "convolutional branch in every stage",
    ),
    key("model", "heads", "2", "attention heads"),
    key("model", "input_size", "96x96", "HxW, both multiples of 32"),
    key(
        "model",
        "decoder_attention",
        "true",
        "attention blocks in the decoder",
    ),
    key("train", "epochs", "10", "passes over the dataset"),
    key("train", "batch_size", "2", "triplets per step"),
    key(
        "train",
        "lr_posenet_decoder",
        "0.0001",
        "learning rate of pose network and decoder",
    ),
    key(
        "train",
        "lr_encoder",
        "0.00005",
        "learning rate of the encoder",
    ),
    key("train", "weight_decay", "0.01", "decoupled weight decay"),
    key("train", "seed", "0", "initialization and data-order seed"),
    key(
        "train",
        "grad_clip",
        "none",
        "global gradient norm limit, or none",
    ),
    key(
        "train",
        "checkpoint_every",
        "0",
        "epochs between checkpoints; 0 keeps only the final one",
    ),
    key(
        "train",
        "resume",
        "none",
        "checkpoint to continue from, or none",
    ),
    key(
        "loss",
        "alpha",
        "0.85",
        "SSIM weight of the photometric error",
    ),
    key("loss", "lambda", "0.001", "smoothness weight"),
    key(
        "loss",
        "automask",
        "true",
        "drop pixels where the unwarped source matches better",
    ),
    key("loss", "d_min", "0.1", "nearest depth"),
    key("loss", "d_max", "100", "farthest depth"),
    key("output", "dir", "run", "log and checkpoint directory"),
    key("bench", "trials", "5", "timed repetitions"),
    key("bench", "steps", "3", "training steps per repetition"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub bench_trials: usize,
    pub bench_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::tiny();
        model.encoder.input_size = (96, 96);
        RunConfig {
            data: PathBuf::from("data"),
            model,
            train: TrainConfig::default(),
            resume: None,
            out: PathBuf::from("run"),
            bench_trials: 5,
            bench_steps: 3,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| value(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values")))
}

fn optional(v: &str) -> Option<&str> {
    (v != "none" && !v.is_empty()).then_some(v)
}

impl RunConfig {
    /// The documented defaults as a config file.
    pub fn default_text() -> String {
        let mut s = String::new();
        let mut section = "";
        for k in KEYS {
            if k.section != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = k.section;
                let _ = writeln!(s, "[{section}]");
            }
            let _ = writeln!(s, "# {}\n{} = {}", k.doc, k.name, k.default);
        }
        s
    }

    fn set(&mut self, section: &str, k: &str, v: &str, base: &Path) -> Result<()> {
        let full = format!("{section}.{k}");
        let key = full.as_str();
        let enc = &mut self.model.encoder;
        let t = &mut self.train;
        match (section, k) {
            ("data", "path") => self.data = base.join(v),
            ("model", "stage_channels") => enc.stage_channels = list(key, v)?,
            ("model", "layers_per_stage") => enc.layers_per_stage = list(key, v)?,
            ("model", "transformer_paths") => enc.num_transformer_paths = value(key, v)?,
            ("model", "conv_path") => enc.use_conv_path = value(key, v)?,
            ("model", "heads") => enc.heads = value(key, v)?,
            ("model", "input_size") => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("{key} must be HxW")))?;
                enc.input_size = (value(key, h)?, value(key, w)?);
            }
            ("model", "decoder_attention") => self.model.decoder_attention = value(key, v)?,
            ("train", "epochs") => t.epochs = value(key, v)?,
            ("train", "batch_size") => t.batch_size = value(key, v)?,
            ("train", "lr_posenet_decoder") => t.lr_posenet_decoder = value(key, v)?,
            ("train", "lr_encoder") => t.lr_encoder = value(key, v)?,
            ("train", "weight_decay") => t.weight_decay = value(key, v)?,
            ("train", "seed") => t.seed = value(key, v)?,
            ("train", "grad_clip") => {
                t.grad_clip = optional(v).map(|v| value(key, v)).transpose()?
            }
            ("train", "checkpoint_every") => t.checkpoint_every = value(key, v)?,
            ("train", "resume") => self.resume = optional(v).map(|v| base.join(v)),
            ("loss", "alpha") => t.loss.alpha = value(key, v)?,
            ("loss", "lambda") => t.loss.lambda = value(key, v)?,
            ("loss", "automask") => t.loss.automask = value(key, v)?,
            ("loss", "d_min") => t.loss.range.d_min = value(key, v)?,
            ("loss", "d_max") => t.loss.range.d_max = value(key, v)?,
            ("output", "dir") => self.out = base.join(v),
            ("bench", "trials") => self.bench_trials = value(key, v)?,
            ("bench", "steps") => self.bench_steps = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses `text`; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig {
            data: base.join("data"),
            out: base.join("run"),
            ..RunConfig::default()
        };
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at("expected key = value".into()))?;
            let Some(sec) = &section else {
                return Err(at("key before any [section]".into()));
            };
            let k = k.trim();
            if !seen.insert(format!("{sec}.{k}")) {
                return Err(at(format!("duplicate key {sec}.{k}")));
            }
            cfg.set(sec, k, v.trim(), base)
                .map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .encoder
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        DepthRange::new(self.train.loss.range.d_min, self.train.loss.range.d_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.bench_trials == 0 || self.bench_steps == 0 {
            return Err(Error::Config(
                "bench trials and steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_parse_to_default() {
        let base = Path::new("");
        let parsed = RunConfig::parse(&RunConfig::default_text(), base).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(RunConfig::parse("", base).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for k in KEYS {
            c.set(k.section, k.name, k.default, Path::new("")).unwrap();
        }
    }

    #[test]
    fn overrides_and_paths() {
        let text = "[train]\nepochs = 3\ngrad_clip = 1.5\nresume = a/b.ckpt\n[data]\npath = ds\n[model]\ninput_size = 64x128\n";
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.grad_clip, Some(1.5));
        assert_eq!(c.resume.as_deref(), Some(Path::new("/cfg/a/b.ckpt")));
        assert_eq!(c.data, Path::new("/cfg/ds"));
        assert_eq!(c.out, Path::new("/cfg/run"));
        assert_eq!(c.model.encoder.input_size, (64, 128));
    }

    #[test]
    fn rejects_bad_files() {
        let base = Path::new("");
        for text in [
            "[train]\nepoch = 3\n",
            "[nope]\n",
            "epochs = 3\n",
            "[train]\nepochs = 3\nepochs = 4\n",
            "[train]\nepochs = many\n",
            "[train]\nlr_encoder = 0.1\n",
            "[model]\ninput_size = 50x64\n",
            "[train]\nepochs\n",
        ] {
            let e = RunConfig::parse(text, base).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text:?}: {e}");
        }
    }
}
