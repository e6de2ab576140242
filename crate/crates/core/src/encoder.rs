//! Depth encoder: a convolutional stem followed by four joint CNN/Transformer
//! stages, each halving the resolution.
//!
//! Every stage embeds its input with four parallel stacks of 3x3 convolutions
//! (receptive fields 3, 3, 5, 7). The first embedding feeds a convolutional
//! branch that models local structure; the other three each feed a stack of
//! transformer layers with factorized attention. Branch outputs are
//! concatenated on channels and fused by a 1x1 convolution.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, LayerNorm, Linear, ParamBuilder};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of the stem and of stages 2-5.
    pub stage_channels: [usize; 5],
    /// Transformer layers per transformer branch in stages 2-5.
    pub layers_per_stage: [usize; 4],
    /// Transformer branches per stage, 0..=3.
    pub num_transformer_paths: usize,
    pub use_conv_path: bool,
    pub heads: usize,
    /// (height, width); both divisible by 32.
    pub input_size: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [32, 48, 64, 96, 128],
            layers_per_stage: [1, 1, 1, 1],
            num_transformer_paths: 3,
            use_conv_path: true,
            heads: 2,
            input_size: (64, 64),
        }
    }
}

impl EncoderConfig {
    /// Full block structure with 1, 3, 6, 3 transformer layers per stage.
    pub fn deep_blocks() -> Self {
        EncoderConfig {
            layers_per_stage: [1, 3, 6, 3],
            ..Self::default()
        }
    }

    /// Small widths for CPU training runs.
    pub fn tiny() -> Self {
        EncoderConfig {
            stage_channels: [32, 48, 64, 96, 128],
            layers_per_stage: [1, 1, 1, 1],
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        if self.num_transformer_paths > 3 {
            return Err(Error::invalid("at most 3 transformer paths"));
        }
        if self.num_transformer_paths == 0 && !self.use_conv_path {
            return Err(Error::invalid("encoder stage needs at least one branch"));
        }
        if self.heads == 0 {
            return Err(Error::invalid("attention heads must be positive"));
        }
        if self.num_transformer_paths > 0 {
            for &c in &self.stage_channels[1..] {
                if c % self.heads != 0 {
                    return Err(Error::invalid(format!(
                        "stage channels {c} not divisible by {} heads",
                        self.heads
                    )));
                }
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::invalid("stage channels must be positive"));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        usize::from(self.use_conv_path) + self.num_transformer_paths
    }
}

/// Five feature maps at 1/2 .. 1/32 of the input resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t> {
    pub levels: Vec<Var<'t>>,
}

fn spatial(x: Var<'_>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

/// Two 3x3 convolutions, stride 2 then 1, each followed by GELU.
#[derive(Clone, Debug)]
pub struct ConvStem {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ConvStem {
    pub fn new(b: &mut ParamBuilder<'_>, cin: usize, cout: usize) -> Result<Self> {
        Ok(ConvStem {
            conv1: b.conv2d("conv1", ConvSpec::new(cin, cout, 3).stride(2))?,
            conv2: b.conv2d("conv2", ConvSpec::new(cout, cout, 3))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let (_, _, h, w) = spatial(image, "conv_stem")?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!("input {h}x{w} not divisible by 32")));
        }
        let x = self.conv1.forward(p, image)?.gelu();
        Ok(self.conv2.forward(p, x)?.gelu())
    }
}

/// A stack of `depth` 3x3 conv + GELU layers; receptive field `2*depth + 1`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    convs: Vec<Conv2d>,
}

impl PatchEmbed {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        cin: usize,
        cout: usize,
        depth: usize,
        stride: usize,
    ) -> Result<Self> {
        let convs = (0..depth)
            .map(|i| {
                let spec = if i == 0 {
                    ConvSpec::new(cin, cout, 3).stride(stride)
                } else {
                    ConvSpec::new(cout, cout, 3)
                };
                b.conv2d(&format!("conv{i}"), spec)
            })
            .collect::<Result<_>>()?;
        Ok(PatchEmbed { convs })
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for c in &self.convs {
            x = c.forward(p, x)?.gelu();
        }
        Ok(x)
    }
}

/// Stacked-conv depth of the four embeddings: receptive fields 3, 3, 5, 7.
pub const EMBED_DEPTHS: [usize; 4] = [1, 1, 2, 3];

/// Parallel patch embeddings for the branches a stage actually uses.
/// Index 0 feeds the conv branch, 1..=3 the transformer branches.
#[derive(Clone, Debug)]
pub struct MultiScalePatchEmbed {
    paths: Vec<(usize, PatchEmbed)>,
}

impl MultiScalePatchEmbed {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        cin: usize,
        cout: usize,
        slots: &[usize],
        stride: usize,
    ) -> Result<Self> {
        let paths = slots
            .iter()
            .map(|&s| {
                Ok((
                    s,
                    PatchEmbed::new(
                        &mut b.scope(&format!("path{s}")),
                        cin,
                        cout,
                        EMBED_DEPTHS[s],
                        stride,
                    )?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MultiScalePatchEmbed { paths })
    }

    /// All four embeddings, downsampling by `stride`.
    pub fn full(b: &mut ParamBuilder<'_>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Self::new(b, cin, cout, &[0, 1, 2, 3], stride)
    }

    pub fn slots(&self) -> Vec<usize> {
        self.paths.iter().map(|(s, _)| *s).collect()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.paths.iter().map(|(_, e)| e.forward(p, x)).collect()
    }
}

/// `(Q / sqrt(embed_dim)) · (softmax_L(K)^T · V)` on `[N, heads, L, Ch]`
/// tensors, with the softmax over the token axis. Cost is linear in `L`.
pub fn factorized_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    embed_dim: usize,
) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 4 || qs != ks || qs != vs {
        return Err(Error::shape(
            "factorized_attention",
            format!("Q {qs:?}, K {ks:?}, V {vs:?} must share a [N, heads, L, Ch] shape"),
        ));
    }
    let k_soft = k.softmax(2)?;
    let context = k_soft.permute(&[0, 1, 3, 2])?.matmul(v)?;
    q.scale(1.0 / (embed_dim as f64).sqrt()).matmul(context)
}

/// Multi-head self attention with factorized attention.
#[derive(Clone, Debug)]
pub struct FactorizedMhsa {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
}

impl FactorizedMhsa {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(FactorizedMhsa {
            q: b.linear("q", dim, dim)?,
            k: b.linear("k", dim, dim)?,
            v: b.linear("v", dim, dim)?,
            proj: b.linear("proj", dim, dim)?,
            heads,
        })
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    /// `x` is `[N, L, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let [n, l, c] = x.shape()[..] else {
            return Err(Error::shape("mhsa", "expected [N, L, C] tokens"));
        };
        let ch = c / self.heads;
        let split = |lin: &Linear| -> Result<Var<'t>> {
            lin.forward(p, x)?
                .reshape(&[n, l, self.heads, ch])?
                .permute(&[0, 2, 1, 3])
        };
        let out = factorized_attention(split(&self.q)?, split(&self.k)?, split(&self.v)?, c)?;
        let merged = out.permute(&[0, 2, 1, 3])?.reshape(&[n, l, c])?;
        self.proj.forward(p, merged)
    }
}

/// Pre-norm transformer layer: `x + MHSA(LN(x))`, then `+ FFN(LN(x))` with a
/// 4x GELU hidden layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: FactorizedMhsa,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: b.layernorm("ln1", dim)?,
            attn: FactorizedMhsa::new(&mut b.scope("attn"), dim, heads)?,
            ln2: b.layernorm("ln2", dim)?,
            fc1: b.linear("fc1", dim, 4 * dim)?,
            fc2: b.linear("fc2", 4 * dim, dim)?,
        })
    }

    /// The two projections that close the residual branches.
    pub fn output_projections(&self) -> [&Linear; 2] {
        [self.attn.proj(), &self.fc2]
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.attn.forward(p, self.ln1.forward(p, x)?)?;
        let x = x.add(a)?;
        let h = self.fc1.forward(p, self.ln2.forward(p, x)?)?.gelu();
        x.add(self.fc2.forward(p, h)?)
    }
}

/// `M` transformer layers applied to a feature map flattened row-major into
/// `L = H*W` tokens.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    layers: Vec<TransformerLayer>,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(&mut b.scope(&format!("layer{i}")), dim, heads))
            .collect::<Result<_>>()?;
        Ok(TransformerBlock { layers })
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (n, c, h, w) = spatial(x, "transformer_block")?;
        let mut t = x.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])?;
        for layer in &self.layers {
            t = layer.forward(p, t)?;
        }
        t.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])
    }
}

/// 1x1 conv, 3x3 depthwise conv, 1x1 conv, plus a residual connection.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub pw2: Conv2d,
}

impl ConvBranch {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(ConvBranch {
            pw1: b.conv2d("pw1", ConvSpec::new(dim, dim, 1))?,
            dw: b.conv2d("dw", ConvSpec::new(dim, dim, 3).depthwise())?,
            pw2: b.conv2d("pw2", ConvSpec::new(dim, dim, 1))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.pw1.forward(p, x)?.gelu();
        let h = self.dw.forward(p, h)?.gelu();
        x.add(self.pw2.forward(p, h)?)
    }
}

/// Channel concat of the branch outputs followed by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct FusePaths {
    pub conv: Conv2d,
}

impl FusePaths {
    pub fn new(b: &mut ParamBuilder<'_>, branches: usize, dim: usize, cout: usize) -> Result<Self> {
        Ok(FusePaths {
            conv: b.conv2d("fuse", ConvSpec::new(branches * dim, cout, 1))?,
        })
    }

    /// `parts` are the present branches in order: conv branch first, then
    /// transformer branches. Absent (ablated) branches are simply left out.
    pub fn forward<'t>(&self, p: &Bound<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("fuse of zero branches"))?;
        let s0 = first.shape();
        if let Some(bad) = parts.iter().find(|v| v.shape() != s0) {
            return Err(Error::shape(
                "fuse_paths",
                format!("{:?} vs {:?}", s0, bad.shape()),
            ));
        }
        let cat = if parts.len() == 1 {
            *first
        } else {
            Var::concat(parts, 1)?
        };
        self.conv.forward(p, cat)
    }
}

/// One joint CNN & Transformer stage.
#[derive(Clone, Debug)]
pub struct JointStage {
    embed: MultiScalePatchEmbed,
    conv_branch: Option<ConvBranch>,
    transformers: Vec<TransformerBlock>,
    fuse: FusePaths,
}

impl JointStage {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        cfg: &EncoderConfig,
        cin: usize,
        cout: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut slots = Vec::new();
        if cfg.use_conv_path {
            slots.push(0);
        }
        slots.extend(1..=cfg.num_transformer_paths);
        let embed = MultiScalePatchEmbed::new(&mut b.scope("embed"), cin, cout, &slots, 2)?;
        let conv_branch = if cfg.use_conv_path {
            Some(ConvBranch::new(&mut b.scope("conv_branch"), cout)?)
        } else {
            None
        };
        let transformers = (0..cfg.num_transformer_paths)
            .map(|i| {
                TransformerBlock::new(&mut b.scope(&format!("trans{i}")), cout, cfg.heads, depth)
            })
            .collect::<Result<_>>()?;
        let fuse = FusePaths::new(b, cfg.branches(), cout, cout)?;
        Ok(JointStage {
            embed,
            conv_branch,
            transformers,
            fuse,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.embed.forward(p, x)?;
        let mut tokens = tokens.into_iter();
        let mut parts = Vec::with_capacity(4);
        if let Some(cb) = &self.conv_branch {
            let t = tokens.next().expect("conv slot embedded");
            parts.push(cb.forward(p, t)?);
        }
        for (tb, t) in self.transformers.iter().zip(tokens) {
            parts.push(tb.forward(p, t)?);
        }
        self.fuse.forward(p, &parts)
    }
}

#[derive(Clone, Debug)]
pub struct DepthEncoder {
    cfg: EncoderConfig,
    stem: ConvStem,
    stages: Vec<JointStage>,
}

impl DepthEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let stem = ConvStem::new(&mut b.scope("stem"), 3, ch[0])?;
        let stages = (0..4)
            .map(|i| {
                JointStage::new(
                    &mut b.scope(&format!("stage{}", i + 2)),
                    cfg,
                    ch[i],
                    ch[i + 1],
                    cfg.layers_per_stage[i],
                )
            })
            .collect::<Result<_>>()?;
        Ok(DepthEncoder {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let (_, c, _, _) = spatial(image, "encode")?;
        if c != 3 {
            return Err(Error::shape(
                "encode",
                format!("expected 3 channels, got {c}"),
            ));
        }
        let mut x = self.stem.forward(p, image)?;
        let mut levels = vec![x];
        for stage in &self.stages {
            x = stage.forward(p, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn attention_single_token() {
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let k = tape.constant(t(&[1, 1, 1, 2], &[0.0, 0.0]));
        let v = tape.constant(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let out = factorized_attention(q, k, v, 2).unwrap().value();
        // softmax over one token is 1; (q/sqrt2) . [[3,4],[3,4]] = (9, 12)/sqrt2
        let s = 2f64.sqrt();
        assert!((out.data()[0] - 9.0 / s).abs() < 1e-12);
        assert!((out.data()[1] - 12.0 / s).abs() < 1e-12);
        assert!((out.data()[0] - 6.3640).abs() < 1e-4);
        assert!((out.data()[1] - 8.4853).abs() < 1e-4);
    }

    #[test]
    fn attention_zero_values() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = tape.constant(Tensor::uniform(&[1, 2, 5, 3], -1.0, 1.0, &mut rng));
        let k = tape.constant(Tensor::uniform(&[1, 2, 5, 3], -1.0, 1.0, &mut rng));
        let v = tape.constant(Tensor::zeros(&[1, 2, 5, 3]));
        let out = factorized_attention(q, k, v, 6).unwrap().value();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rejects_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(factorized_attention(a, a, b, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            input_size: (48, 64),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let empty = EncoderConfig {
            num_transformer_paths: 0,
            use_conv_path: false,
            ..Default::default()
        };
        assert!(empty.validate().is_err());
        assert_eq!(EncoderConfig::deep_blocks().layers_per_stage, [1, 3, 6, 3]);
    }

    #[test]
    fn stem_rejects_indivisible_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stem = ConvStem::new(&mut ParamBuilder::new(&mut store, &mut rng, "s"), 3, 4).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 40, 64]));
        assert!(matches!(stem.forward(&p, x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fuse =
            FusePaths::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), 2, 2, 2).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            fuse.forward(&p, &[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
