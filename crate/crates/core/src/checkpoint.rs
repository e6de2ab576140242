//! Binary checkpoints of model weights and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MVCKPT01"
//! header_len   u32
//! header       header_len bytes of UTF-8 `key=value` lines
//! record_count u32
//! record       repeated record_count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   values     product(dims) x f64
//! ```
//!
//! Header keys: `step`, `epoch`, `stage_channels`, `layers_per_stage`,
//! `transformer_paths`, `conv_path`, `heads`, `input_size` (`HxW`),
//! `decoder_attention`, `d_min`, `d_max`, and when optimizer state is present `adam_step`,
//! `beta1`, `beta2`, `eps`, `weight_decay`. Records are named `param:<name>`
//! in parameter order, followed by `adam_m:<name>` and `adam_v:<name>` if
//! optimizer state is present.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::DepthRange;
use crate::model::{ModelConfig, MonoVit};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVCKPT01";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Depth range the disparity output was trained against.
    pub range: DepthRange,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, "truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(path, "text is not UTF-8"))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()?;
        let name = self.text(n)?.to_string();
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(self.path, format!("{name}: shape too large")))?;
        let data = self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::format(self.path, format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    /// Snapshot of a model and optional optimizer.
    pub fn capture(
        model: &MonoVit,
        optimizer: Option<&AdamW>,
        range: DepthRange,
        step: u64,
        epoch: u64,
    ) -> Self {
        let mut params = model.params.clone();
        params.zero_grads();
        Checkpoint {
            model: model.cfg.clone(),
            range,
            step,
            epoch,
            params,
            optimizer: optimizer.cloned(),
        }
    }

    fn header(&self) -> String {
        let e = &self.model.encoder;
        let mut h = format!(
            "step={}\nepoch={}\nstage_channels={}\nlayers_per_stage={}\ntransformer_paths={}\n\
             conv_path={}\nheads={}\ninput_size={}x{}\ndecoder_attention={}\nd_min={}\nd_max={}\n",
            self.step,
            self.epoch,
            join(&e.stage_channels),
            join(&e.layers_per_stage),
            e.num_transformer_paths,
            e.use_conv_path,
            e.heads,
            e.input_size.0,
            e.input_size.1,
            self.model.decoder_attention,
            self.range.d_min,
            self.range.d_max
        );
        if let Some(o) = &self.optimizer {
            h += &format!(
                "adam_step={}\nbeta1={}\nbeta2={}\neps={}\nweight_decay={}\n",
                o.step, o.cfg.beta1, o.cfg.beta2, o.cfg.eps, o.cfg.weight_decay
            );
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let header = self.header();
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        let per_param = if self.optimizer.is_some() { 3 } else { 1 };
        put_u32(&mut out, self.params.len() * per_param);
        for (name, t) in self.params.iter() {
            put_record(&mut out, &format!("param:{name}"), t);
        }
        if let Some(o) = &self.optimizer {
            for (prefix, moments) in [("adam_m", &o.m), ("adam_v", &o.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    put_record(&mut out, &format!("{prefix}:{name}"), t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let n = r.u32()?;
        let header = r.text(n)?;
        let mut kv = HashMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing header key {k}")))
        };
        fn parse<T: std::str::FromStr>(s: &str, k: &str, path: &Path) -> Result<T> {
            s.parse()
                .map_err(|_| Error::format(path, format!("bad value for {k}: {s:?}")))
        }
        let num = |k: &str| -> Result<u64> { parse(get(k)?, k, path) };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?.split(',').map(|s| parse(s, k, path)).collect()
        };
        let stage_channels: [usize; 5] = list("stage_channels")?
            .try_into()
            .map_err(|_| bad("stage_channels needs 5 values".into()))?;
        let layers_per_stage: [usize; 4] = list("layers_per_stage")?
            .try_into()
            .map_err(|_| bad("layers_per_stage needs 4 values".into()))?;
        let (h, w) = get("input_size")?
            .split_once('x')
            .ok_or_else(|| bad("input_size must be HxW".into()))?;
        let model = ModelConfig {
            encoder: EncoderConfig {
                stage_channels,
                layers_per_stage,
                num_transformer_paths: parse(get("transformer_paths")?, "transformer_paths", path)?,
                use_conv_path: parse(get("conv_path")?, "conv_path", path)?,
                heads: parse(get("heads")?, "heads", path)?,
                input_size: (parse(h, "input_size", path)?, parse(w, "input_size", path)?),
            },
            decoder_attention: parse(get("decoder_attention")?, "decoder_attention", path)?,
        };
        model.encoder.validate().map_err(|e| bad(e.to_string()))?;
        let f = |k: &str| -> Result<f64> { parse(get(k)?, k, path) };
        let range = DepthRange::new(f("d_min")?, f("d_max")?).map_err(|e| bad(e.to_string()))?;

        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            let (kind, pname) = name
                .split_once(':')
                .ok_or_else(|| bad(format!("bad record name {name:?}")))?;
            match kind {
                "param" => {
                    params.add(pname, t).map_err(|e| bad(e.to_string()))?;
                }
                "adam_m" | "adam_v" => {
                    let list = if kind == "adam_m" { &mut m } else { &mut v };
                    let k = list.len();
                    let expected = params
                        .ids()
                        .nth(k)
                        .map(|id| (params.name(id), params.get(id).shape()));
                    match expected {
                        Some((n, s)) if n == pname && s == t.shape() => list.push(t),
                        _ => {
                            return Err(bad(format!("moment {name} does not match parameter {k}")))
                        }
                    }
                }
                _ => return Err(bad(format!("unknown record kind {kind}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        let optimizer = if kv.contains_key("adam_step") {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(bad("optimizer moments incomplete".into()));
            }
            Some(AdamW {
                cfg: AdamWConfig {
                    beta1: f("beta1")?,
                    beta2: f("beta2")?,
                    eps: f("eps")?,
                    weight_decay: f("weight_decay")?,
                },
                step: num("adam_step")?,
                m,
                v,
            })
        } else if !m.is_empty() || !v.is_empty() {
            return Err(bad("moments without optimizer header".into()));
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            range,
            step: num("step")?,
            epoch: num("epoch")?,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        fs::write(tmp, self.to_bytes()).map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model. Every parameter of the configured architecture
    /// must be present with the right shape.
    pub fn build_model(&self) -> Result<MonoVit> {
        let mut model = MonoVit::new(&self.model, 0)?;
        let copied = model.params.load_from(&self.params)?;
        if copied != model.params.len() || copied != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, {copied} match a model of {}",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}
