//! Top-down disparity decoder with skip and cross-scale connections.
//!
//! Decoder level `k` works at `1/2^k` of the input resolution (k = 4 .. 0).
//! Its input is the concatenation of
//! - the previous decoder feature (level k+1), upsampled 2x,
//! - the encoder feature at the same resolution (k >= 1),
//! - the decoder feature from level k+2, upsampled 4x, when it exists.
//!
//! A 3x3 conv reduces the concatenation, then an attention block reweights it.
//! Sigmoid disparity heads read levels 0..=3.

use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, Linear, ParamBuilder};
use crate::tensor::{UpsampleMode, Var};

/// Disparity maps at scales 1, 1/2, 1/4, 1/8, full resolution first.
#[derive(Clone, Debug)]
pub struct DispPyramid<'t> {
    pub maps: Vec<Var<'t>>,
}

/// Channel gate (global average pool, 2-layer MLP, sigmoid) followed by a
/// spatial gate (channel mean and max, 7x7 conv, sigmoid).
#[derive(Clone, Debug)]
pub struct AttenBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl AttenBlock {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(2);
        Ok(AttenBlock {
            fc1: b.linear("fc1", channels, hidden)?,
            fc2: b.linear("fc2", hidden, channels)?,
            spatial: b.conv2d("spatial", ConvSpec::new(2, 1, 7))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let [n, c, _, _] = x.shape()[..] else {
            return Err(Error::shape("atten_block", "expected [N,C,H,W]"));
        };
        let pooled = x.mean_axis(3, false)?.mean_axis(2, false)?;
        let hidden = self.fc1.forward(p, pooled)?.gelu();
        let gate_c = self
            .fc2
            .forward(p, hidden)?
            .sigmoid()
            .reshape(&[n, c, 1, 1])?;
        let x = x.mul(gate_c)?;
        let desc = Var::concat(&[x.mean_axis(1, true)?, x.max_axis(1, true)?], 1)?;
        let gate_s = self.spatial.forward(p, desc)?.sigmoid();
        x.mul(gate_s)
    }
}

/// 3x3 conv, GELU, 3x3 conv to one channel, sigmoid.
#[derive(Clone, Debug)]
pub struct DispHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl DispHead {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(DispHead {
            conv1: b.conv2d("conv1", ConvSpec::new(channels, channels, 3))?,
            conv2: b.conv2d("conv2", ConvSpec::new(channels, 1, 3))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?.gelu();
        Ok(self.conv2.forward(p, h)?.sigmoid())
    }
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv2d,
    atten: Option<AttenBlock>,
}

#[derive(Clone, Debug)]
pub struct DepthDecoder {
    /// Indexed by level k = 0..=4.
    levels: Vec<Level>,
    heads: Vec<DispHead>,
}

impl DepthDecoder {
    /// Decoder channels mirror the encoder: level k >= 1 uses the channel
    /// count of the encoder feature at that resolution, level 0 reuses the
    /// stem width.
    pub fn channels(cfg: &EncoderConfig) -> [usize; 5] {
        let c = cfg.stage_channels;
        [c[0], c[0], c[1], c[2], c[3]]
    }

    pub fn new(b: &mut ParamBuilder<'_>, cfg: &EncoderConfig, use_atten: bool) -> Result<Self> {
        let enc = cfg.stage_channels;
        let dec = Self::channels(cfg);
        let mut levels = Vec::with_capacity(5);
        for k in 0..5 {
            let prev = if k == 4 { enc[4] } else { dec[k + 1] };
            let skip = if k >= 1 { enc[k - 1] } else { 0 };
            let cross = if k + 2 <= 4 { dec[k + 2] } else { 0 };
            let mut lb = b.scope(&format!("level{k}"));
            levels.push(Level {
                conv: lb.conv2d("conv", ConvSpec::new(prev + skip + cross, dec[k], 3))?,
                atten: if use_atten {
                    Some(AttenBlock::new(&mut lb.scope("atten"), dec[k])?)
                } else {
                    None
                },
            });
        }
        let heads = (0..4)
            .map(|k| DispHead::new(&mut b.scope(&format!("head{k}")), dec[k]))
            .collect::<Result<_>>()?;
        Ok(DepthDecoder { levels, heads })
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, pyr: &FeaturePyramid<'t>) -> Result<DispPyramid<'t>> {
        if pyr.levels.len() != 5 {
            return Err(Error::invalid(format!(
                "decoder needs a 5-level pyramid, got {}",
                pyr.levels.len()
            )));
        }
        let mut feats: [Option<Var<'t>>; 5] = [None; 5];
        let mut prev = pyr.levels[4];
        for k in (0..5).rev() {
            let mut parts = vec![prev.upsample(2, UpsampleMode::Bilinear)?];
            if k >= 1 {
                parts.push(pyr.levels[k - 1]);
            }
            if k + 2 <= 4 {
                let far = feats[k + 2].expect("decoded two levels down");
                parts.push(far.upsample(4, UpsampleMode::Bilinear)?);
            }
            let level = &self.levels[k];
            let mut x = level.conv.forward(p, Var::concat(&parts, 1)?)?.gelu();
            if let Some(a) = &level.atten {
                x = a.forward(p, x)?;
            }
            feats[k] = Some(x);
            prev = x;
        }
        let maps = self
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| h.forward(p, feats[k].expect("decoded")))
            .collect::<Result<_>>()?;
        Ok(DispPyramid { maps })
    }
}
