//! The depth network (encoder + decoder) and the pose network in one
//! parameter store. Parameter names start with `encoder.`, `decoder.` or
//! `pose.`; the optimizer uses the prefix to pick a learning rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DepthDecoder, DispPyramid};
use crate::encoder::{DepthEncoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamBuilder, ParamStore};
use crate::pose::{PoseNet, PoseVar};
use crate::tensor::{Tape, Tensor, Var};

/// Images in `[0, 1]` are shifted and scaled by these before both networks.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.225;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Spatial and channel attention in every decoder level.
    pub decoder_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            decoder_attention: true,
        }
    }
}

pub struct MonoVit {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder: DepthEncoder,
    decoder: DepthDecoder,
    pose: PoseNet,
}

fn normalize(image: Var<'_>) -> Var<'_> {
    image.add_scalar(-INPUT_MEAN).scale(1.0 / INPUT_STD)
}

impl MonoVit {
    /// Fresh initialization; identical `cfg` and `seed` give identical weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut root = ParamBuilder::new(&mut params, &mut rng, "");
        let encoder = DepthEncoder::new(&mut root.scope("encoder"), &cfg.encoder)?;
        let decoder = DepthDecoder::new(
            &mut root.scope("decoder"),
            &cfg.encoder,
            cfg.decoder_attention,
        )?;
        let pose = PoseNet::new(&mut root.scope("pose"))?;
        Ok(MonoVit {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
            pose,
        })
    }

    fn check_image(&self, image: &Var<'_>, channels: usize) -> Result<()> {
        let s = image.shape();
        let (h, w) = self.cfg.encoder.input_size;
        if s.len() != 4 || s[1] != channels || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "model",
                format!("expected [N,{channels},{h},{w}], got {s:?}"),
            ));
        }
        Ok(())
    }

    pub fn features<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        self.check_image(&image, 3)?;
        self.encoder.encode(p, normalize(image))
    }

    /// Four disparity maps, full resolution first.
    pub fn depth<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<DispPyramid<'t>> {
        let pyr = self.features(p, image)?;
        self.decoder.decode(p, &pyr)
    }

    /// Motion mapping target camera coordinates into the source camera.
    pub fn pose<'t>(&self, p: &Bound<'t>, target: Var<'t>, source: Var<'t>) -> Result<PoseVar<'t>> {
        self.check_image(&target, 3)?;
        self.check_image(&source, 3)?;
        let pair = normalize(Var::concat(&[target, source], 1)?);
        PoseVar::from_vector(self.pose.forward(p, pair)?)
    }

    /// Full-resolution disparity `[N,1,H,W]` without recording gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let d = self.depth(&p, tape.constant(image.clone()))?;
        Ok((*d.maps[0].value()).clone())
    }

    /// Channel-mean absolute activation of every encoder level, `[N,1,h,w]`
    /// at that level's resolution.
    pub fn activation_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let pyr = self.features(&p, tape.constant(image.clone()))?;
        pyr.levels
            .iter()
            .map(|l| Ok((*l.abs().mean_axis(1, true)?.value()).clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.encoder.input_size = (32, 64);
        c
    }

    #[test]
    fn same_seed_same_weights() {
        let a = MonoVit::new(&small(), 5).unwrap();
        let b = MonoVit::new(&small(), 5).unwrap();
        let c = MonoVit::new(&small(), 6).unwrap();
        let eq = |x: &MonoVit, y: &MonoVit| {
            x.params
                .iter()
                .zip(y.params.iter())
                .all(|(p, q)| p.1.data() == q.1.data())
        };
        assert!(eq(&a, &b));
        assert!(!eq(&a, &c));
    }

    #[test]
    fn parameter_count_depends_only_on_the_config() {
        let count = |size, seed| {
            let mut c = ModelConfig::tiny();
            c.encoder.input_size = size;
            MonoVit::new(&c, seed).unwrap()
        };
        let m = count((96, 96), 0);
        assert_eq!(m.num_parameters(), 3_989_789);
        assert_eq!(count((32, 64), 9).num_parameters(), m.num_parameters());

        // 3x3 convs with bias, 6 -> 16 -> ... -> 256, then a 256 -> 6 linear head.
        let mut pose = 0;
        let mut cin = 6;
        for c in [16, 32, 64, 128, 256] {
            pose += 9 * cin * c + c;
            cin = c;
        }
        pose += 256 * 6 + 6;
        let got: usize = m
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("pose."))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(got, pose);
    }

    #[test]
    fn names_are_grouped() {
        let m = MonoVit::new(&small(), 0).unwrap();
        for (name, _) in m.params.iter() {
            assert!(
                ["encoder.", "decoder.", "pose."]
                    .iter()
                    .any(|p| name.starts_with(p)),
                "{name}"
            );
        }
    }

    #[test]
    fn prediction_shapes_and_range() {
        let m = MonoVit::new(&small(), 1).unwrap();
        let img = Tensor::full(&[1, 3, 32, 64], 0.3);
        let d = m.predict(&img).unwrap();
        assert_eq!(d.shape(), &[1, 1, 32, 64]);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let maps = m.activation_maps(&img).unwrap();
        let sizes: Vec<_> = maps.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        assert_eq!(sizes, [(16, 32), (8, 16), (4, 8), (2, 4), (1, 2)]);
        assert!(m.predict(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
    }

    #[test]
    fn pose_is_small_at_init() {
        let m = MonoVit::new(&small(), 2).unwrap();
        let tape = Tape::new();
        let p = m.params.bind(&tape, false);
        let a = tape.constant(Tensor::full(&[1, 3, 32, 64], 0.2));
        let b = tape.constant(Tensor::full(&[1, 3, 32, 64], 0.7));
        let pose = m.pose(&p, a, b).unwrap();
        let t = pose.translation.value();
        assert!(t.data().iter().all(|v| v.abs() < 0.1));
    }
}
