//! Self-supervised objective: SSIM + L1 photometric error, per-pixel minimum
//! over the two source frames, auto-masking of static pixels, edge-aware
//! smoothness, averaged over the disparity scales.

use crate::decoder::DispPyramid;
use crate::error::{Error, Result};
use crate::geometry::{disp_to_depth, reconstruct, DepthRange, Intrinsics};
use crate::pose::PoseVar;
use crate::tensor::{PadMode, Tensor, UpsampleMode, Var};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Added to the photometric error of out-of-view samples so the per-pixel
/// minimum prefers the other source.
const INVALID_PENALTY: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// SSIM weight in the photometric error.
    pub alpha: f64,
    /// Smoothness weight.
    pub lambda: f64,
    pub range: DepthRange,
    pub automask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            lambda: 1e-3,
            range: DepthRange::default(),
            automask: true,
        }
    }
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn pool3<'t>(x: Var<'t>) -> Result<Var<'t>> {
    x.pad2d(1, PadMode::Reflect)?.avg_pool2d(3)
}

/// Per-pixel SSIM over 3x3 windows (reflection padded).
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("ssim", &a, &b)?;
    let mu_a = pool3(a)?;
    let mu_b = pool3(b)?;
    let mu_aa = mu_a.mul(mu_a)?;
    let mu_bb = mu_b.mul(mu_b)?;
    let mu_ab = mu_a.mul(mu_b)?;
    let sig_a = pool3(a.mul(a)?)?.sub(mu_aa)?;
    let sig_b = pool3(b.mul(b)?)?.sub(mu_bb)?;
    let sig_ab = pool3(a.mul(b)?)?.sub(mu_ab)?;
    let num = mu_ab
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(sig_ab.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(sig_a.add(sig_b)?.add_scalar(SSIM_C2))?;
    num.div(den)
}

/// `alpha (1 - SSIM)/2 + (1 - alpha) |recon - target|`, averaged over
/// channels to `[N,1,H,W]`. `(1 - SSIM)/2` is clamped to `[0, 1]`.
pub fn photometric<'t>(recon: Var<'t>, target: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    same_shape("photometric", &recon, &target)?;
    let s = ssim(recon, target)?
        .neg()
        .add_scalar(1.0)
        .scale(0.5)
        .clamp(0.0, 1.0)
        .scale(alpha);
    let l1 = recon.sub(target)?.abs().scale(1.0 - alpha);
    s.add(l1)?.mean_axis(1, true)
}

pub fn min_reprojection<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("min_reprojection", &a, &b)?;
    a.minimum(b)
}

/// 1 where warping beats not warping: `min(warped) < min(identity)`.
pub fn automask(warped: [&Tensor; 2], identity: [&Tensor; 2]) -> Result<Tensor> {
    let shape = warped[0].shape();
    if [warped[1], identity[0], identity[1]]
        .iter()
        .any(|t| t.shape() != shape)
    {
        return Err(Error::shape("automask", "loss maps differ in shape"));
    }
    let data = (0..warped[0].numel())
        .map(|i| {
            let w = warped[0].data()[i].min(warped[1].data()[i]);
            let id = identity[0].data()[i].min(identity[1].data()[i]);
            f64::from(u8::from(w < id))
        })
        .collect();
    Tensor::new(shape, data)
}

/// Edge-aware smoothness of mean-normalised disparity: the mean of
/// `|dx d*| exp(-|dx I|)` plus the mean of the same term along y.
pub fn smoothness<'t>(disp: Var<'t>, image: Var<'t>) -> Result<Var<'t>> {
    let ds = disp.shape();
    let is = image.shape();
    if ds.len() != 4 || ds[1] != 1 || is.len() != 4 || ds[0] != is[0] || ds[2..] != is[2..] {
        return Err(Error::shape(
            "smoothness",
            format!("disp {ds:?} vs image {is:?}"),
        ));
    }
    let (h, w) = (ds[2], ds[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "smoothness",
            format!("need at least 2x2, got {h}x{w}"),
        ));
    }
    let mean = disp.mean_axis(3, true)?.mean_axis(2, true)?;
    if mean.value().data().iter().any(|&m| !(m > 0.0)) {
        return Err(Error::invalid(
            "smoothness needs disparity with positive mean",
        ));
    }
    let d = disp.div(mean)?;
    let tape = disp.tape();
    let img = image.value();
    let edge = |axis: usize| -> Result<Var<'t>> {
        let len = if axis == 3 { w } else { h };
        let i = tape.constant((*img).clone());
        let g = i
            .slice(axis as isize, 1, len - 1)?
            .sub(i.slice(axis as isize, 0, len - 1)?)?;
        let weight = g.abs().mean_axis(1, true)?.neg().exp().detach();
        let dd = d
            .slice(axis as isize, 1, len - 1)?
            .sub(d.slice(axis as isize, 0, len - 1)?)?;
        Ok(dd.abs().mul(weight)?.mean())
    };
    edge(3)?.add(edge(2)?)
}

/// Frames and poses for one batch. `sources[0]` is the forward source
/// (t+1), `sources[1]` the backward one (t-1); `poses[i]` maps target
/// camera coordinates into source `i`.
#[derive(Clone, Copy, Debug)]
pub struct ViewSet<'t> {
    pub target: Var<'t>,
    pub sources: [Var<'t>; 2],
    pub poses: [PoseVar<'t>; 2],
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_scale: Vec<f64>,
    pub photometric: f64,
    pub smoothness: f64,
    /// Fraction of pixels (over all scales) that are in view and survive
    /// the auto-mask.
    pub automask_ratio: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.per_scale.iter().all(|v| v.is_finite())
    }
}

struct Reprojection<'t> {
    /// Per-pixel min over sources, out-of-view samples penalised.
    min_loss: Var<'t>,
    /// 1 where at least one source sample is in view.
    valid: Tensor,
    warped: [Tensor; 2],
}

fn reprojection<'t>(views: &ViewSet<'t>, depth: Var<'t>, alpha: f64) -> Result<Reprojection<'t>> {
    let tape = depth.tape();
    let mut losses = Vec::with_capacity(2);
    let mut masks = Vec::with_capacity(2);
    for (src, pose) in views.sources.iter().zip(&views.poses) {
        let (recon, proj) = reconstruct(*src, depth, pose, &views.intrinsics)?;
        let l = photometric(recon, views.target, alpha)?;
        let penalty = proj.mask.map(|m| (1.0 - m) * INVALID_PENALTY);
        losses.push(l.add(tape.constant(penalty))?);
        masks.push(proj.mask);
    }
    let valid = Tensor::new(
        masks[0].shape(),
        masks[0]
            .data()
            .iter()
            .zip(masks[1].data())
            .map(|(a, b)| a.max(*b))
            .collect(),
    )?;
    Ok(Reprojection {
        min_loss: min_reprojection(losses[0], losses[1])?,
        warped: [(*losses[0].value()).clone(), (*losses[1].value()).clone()],
        valid,
    })
}

/// Mean over in-view pixels of the per-pixel minimum photometric error for a
/// given depth map, without auto-masking.
pub fn reprojection_error(views: &ViewSet<'_>, depth: Var<'_>, alpha: f64) -> Result<f64> {
    let r = reprojection(views, depth, alpha)?;
    let v = r.min_loss.value();
    let (mut sum, mut count) = (0.0, 0.0);
    for (l, m) in v.data().iter().zip(r.valid.data()) {
        if *m > 0.0 {
            sum += l;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::invalid("no pixel is in view of either source"));
    }
    Ok(sum / count)
}

/// Multi-scale objective. Returns the differentiable total and its report.
pub fn total_loss<'t>(
    disps: &DispPyramid<'t>,
    views: &ViewSet<'t>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossReport)> {
    if disps.maps.is_empty() {
        return Err(Error::invalid("empty disparity pyramid"));
    }
    let full = views.target.shape();
    let tape = views.target.tape();
    let identity = if cfg.automask {
        let a = photometric(views.sources[0], views.target, cfg.alpha)?.value();
        let b = photometric(views.sources[1], views.target, cfg.alpha)?.value();
        Some([(*a).clone(), (*b).clone()])
    } else {
        None
    };

    let mut report = LossReport::default();
    let mut terms = Vec::with_capacity(disps.maps.len());
    let mut kept = 0.0;
    for &disp in &disps.maps {
        let ds = disp.shape();
        let factor = full[2] / ds[2].max(1);
        if ds.len() != 4 || ds[2] * factor != full[2] || ds[3] * factor != full[3] {
            return Err(Error::shape(
                "total_loss",
                format!("disparity {ds:?} for image {full:?}"),
            ));
        }
        let disp = if factor > 1 {
            disp.upsample(factor, UpsampleMode::Bilinear)?
        } else {
            disp
        };
        let depth = disp_to_depth(disp, cfg.range)?;
        let r = reprojection(views, depth, cfg.alpha)?;
        let weight = match &identity {
            Some(id) => {
                let mu = automask([&r.warped[0], &r.warped[1]], [&id[0], &id[1]])?;
                Tensor::new(
                    mu.shape(),
                    mu.data()
                        .iter()
                        .zip(r.valid.data())
                        .map(|(a, b)| a * b)
                        .collect(),
                )?
            }
            None => r.valid.clone(),
        };
        kept += weight.mean();
        let denom = r.valid.sum().max(1.0);
        let photo = r
            .min_loss
            .mul(tape.constant(weight))?
            .sum()
            .scale(1.0 / denom);
        let smooth = smoothness(disp, views.target)?;
        let term = photo.add(smooth.scale(cfg.lambda))?;
        report.photometric += photo.item();
        report.smoothness += smooth.item();
        report.per_scale.push(term.item());
        terms.push(term);
    }
    let s = terms.len() as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    let total = total.scale(1.0 / s);
    report.total = total.item();
    report.photometric /= s;
    report.smoothness /= s;
    report.automask_ratio = kept / s;
    Ok((total, report))
}
