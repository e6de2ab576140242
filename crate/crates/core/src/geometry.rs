//! Pinhole camera model and inverse warping.
//!
//! Camera frame: x right, y down, z forward. Pixel `(u, v)` is the centre of
//! column `u`, row `v`.

use crate::error::{Error, Result};
use crate::pose::{PoseVar, Se3};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pixel of a camera-frame point, `None` behind the camera.
    pub fn project_point(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > DEPTH_EPS).then(|| {
            (
                self.fx * p[0] / p[2] + self.cx,
                self.fy * p[1] / p[2] + self.cy,
            )
        })
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange {
            d_min: 0.1,
            d_max: 100.0,
        }
    }
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        let r = DepthRange { d_min, d_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::invalid(format!("invalid depth range {self:?}")));
        }
        Ok(())
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.d_min, self.d_max)
    }
}

/// Points closer than this are treated as behind the camera.
pub const DEPTH_EPS: f64 = 1e-3;

/// Slack on the image bounds so round-trip roundoff at the border stays valid.
const BORDER_TOL: f64 = 1e-6;

/// Sigmoid output to depth, linear in inverse depth:
/// `1/D = 1/d_max + sigma (1/d_min - 1/d_max)`.
pub fn disp_to_depth<'t>(sigma: Var<'t>, range: DepthRange) -> Result<Var<'t>> {
    range.validate()?;
    let (lo, hi) = (1.0 / range.d_max, 1.0 / range.d_min);
    let inv = sigma.scale(hi - lo).add_scalar(lo);
    sigma.tape().scalar(1.0).div(inv)
}

/// f64 counterpart of [`disp_to_depth`].
pub fn disp_to_depth_value(sigma: f64, range: DepthRange) -> f64 {
    let (lo, hi) = (1.0 / range.d_max, 1.0 / range.d_min);
    1.0 / (lo + sigma * (hi - lo))
}

fn check_nchw(op: &'static str, v: &Var<'_>, c: usize) -> Result<[usize; 4]> {
    match v.shape()[..] {
        [n, cc, h, w] if cc == c => Ok([n, cc, h, w]),
        _ => Err(Error::shape(
            op,
            format!("expected [N,{c},H,W], got {:?}", v.shape()),
        )),
    }
}

/// `[N,1,H,W]` depth to `[N,3,H,W]` camera-frame points.
pub fn backproject<'t>(depth: Var<'t>, k: &Intrinsics) -> Result<Var<'t>> {
    let [_, _, h, w] = check_nchw("backproject", &depth, 1)?;
    let mut rays = vec![0.0; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let r = k.ray(u as f64, v as f64);
            for c in 0..3 {
                rays[c * h * w + v * w + u] = r[c];
            }
        }
    }
    let rays = depth
        .tape()
        .constant(Tensor::from_parts(vec![1, 3, h, w], rays));
    depth.mul(rays)
}

/// Sample grid (channel 0 = x, channel 1 = y, pixels) and a constant 0/1
/// validity mask `[N,1,H,W]`.
#[derive(Clone, Debug)]
pub struct Projection<'t> {
    pub grid: Var<'t>,
    pub mask: Tensor,
}

impl Projection<'_> {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

/// Applies `pose` to `points` and projects through `k`. Depth is clamped to
/// [`DEPTH_EPS`] before the division; such pixels are masked out.
pub fn project<'t>(points: Var<'t>, pose: &PoseVar<'t>, k: &Intrinsics) -> Result<Projection<'t>> {
    let [n, _, h, w] = check_nchw("project", &points, 3)?;
    let flat = points.reshape(&[n, 3, h * w])?;
    let moved = pose.rotation.matmul(flat)?.add(pose.translation)?;
    let x = moved.slice(1, 0, 1)?;
    let y = moved.slice(1, 1, 1)?;
    let z = moved.slice(1, 2, 1)?;
    let zc = z.clamp(DEPTH_EPS, f64::INFINITY);
    let u = x.div(zc)?.scale(k.fx).add_scalar(k.cx);
    let v = y.div(zc)?.scale(k.fy).add_scalar(k.cy);
    let grid = Var::concat(&[u, v], 1)?.reshape(&[n, 2, h, w])?;

    let (zv, uv, vv) = (z.value(), u.value(), v.value());
    let (wmax, hmax) = ((w - 1) as f64 + BORDER_TOL, (h - 1) as f64 + BORDER_TOL);
    let mask = zv
        .data()
        .iter()
        .zip(uv.data())
        .zip(vv.data())
        .map(|((&z, &u), &v)| {
            let ok = z > DEPTH_EPS
                && (-BORDER_TOL..=wmax).contains(&u)
                && (-BORDER_TOL..=hmax).contains(&v);
            f64::from(u8::from(ok))
        })
        .collect();
    Ok(Projection {
        grid,
        mask: Tensor::from_parts(vec![n, 1, h, w], mask),
    })
}

/// Bilinear reconstruction of the target from `source` at `proj.grid`.
/// Out-of-view samples take the border value; `proj.mask` flags them.
pub fn warp<'t>(source: Var<'t>, proj: &Projection<'t>) -> Result<Var<'t>> {
    source.grid_sample(proj.grid)
}

/// Full inverse warp of `source` into the target view.
pub fn reconstruct<'t>(
    source: Var<'t>,
    depth: Var<'t>,
    pose: &PoseVar<'t>,
    k: &Intrinsics,
) -> Result<(Var<'t>, Projection<'t>)> {
    let proj = project(backproject(depth, k)?, pose, k)?;
    Ok((warp(source, &proj)?, proj))
}

/// Identity pose on a tape, repeated `n` times.
pub fn identity_poses(tape: &crate::tensor::Tape, n: usize) -> PoseVar<'_> {
    PoseVar::constant(tape, &vec![Se3::identity(); n])
}
