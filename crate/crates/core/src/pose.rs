//! Relative camera pose: the pose network, SE(3) in plain f64, and a
//! differentiable axis-angle to rotation map for the training graph.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, Linear, ParamBuilder};
use crate::tensor::{OpKind, Tensor, Var};

/// Axis-angle rotation (radians times unit axis) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose6DoF {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose6DoF {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::invalid(format!(
                "pose needs 6 values, got {}",
                v.len()
            )));
        }
        Ok(Pose6DoF {
            axis_angle: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        })
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (self.axis_angle, self.translation);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }
}

pub type Mat3 = [[f64; 3]; 3];

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

const SERIES_BELOW: f64 = 1e-2;

/// `sin(theta)/theta` as a function of `t = theta^2`.
fn rodrigues_a(t: f64) -> f64 {
    if t < SERIES_BELOW {
        1.0 - t / 6.0 + t * t / 120.0 - t.powi(3) / 5040.0 + t.powi(4) / 362_880.0
    } else {
        let th = t.sqrt();
        th.sin() / th
    }
}

/// `(1 - cos(theta))/theta^2` as a function of `t = theta^2`.
fn rodrigues_b(t: f64) -> f64 {
    if t < SERIES_BELOW {
        0.5 - t / 24.0 + t * t / 720.0 - t.powi(3) / 40_320.0 + t.powi(4) / 3_628_800.0
    } else {
        let th = t.sqrt();
        (1.0 - th.cos()) / t
    }
}

fn rodrigues_a_dt(t: f64) -> f64 {
    if t < SERIES_BELOW {
        -1.0 / 6.0 + 2.0 * t / 120.0 - 3.0 * t * t / 5040.0 + 4.0 * t.powi(3) / 362_880.0
    } else {
        let th = t.sqrt();
        (th * th.cos() - th.sin()) / (2.0 * th * t)
    }
}

fn rodrigues_b_dt(t: f64) -> f64 {
    if t < SERIES_BELOW {
        -1.0 / 24.0 + 2.0 * t / 720.0 - 3.0 * t * t / 40_320.0 + 4.0 * t.powi(3) / 3_628_800.0
    } else {
        let th = t.sqrt();
        (th * th.sin() - 2.0 * (1.0 - th.cos())) / (2.0 * t * t)
    }
}

fn skew(r: [f64; 3]) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rodrigues' formula `R = I + A [r]x + B [r]x^2`.
pub fn so3_exp(r: [f64; 3]) -> Mat3 {
    let t = r.iter().map(|x| x * x).sum::<f64>();
    let (a, b) = (rodrigues_a(t), rodrigues_b(t));
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = f64::from(u8::from(i == j)) + a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Inverse of [`so3_exp`] for rotation angles in `[0, pi]`.
pub fn so3_log(r: &Mat3) -> [f64; 3] {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        // R - R^T = 2 [w]x to first order
        return vee.map(|v| v / 2.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // near pi the antisymmetric part vanishes; read the axis from R + I
        let i = (0..3)
            .max_by(|&a, &b| r[a][a].total_cmp(&r[b][b]))
            .unwrap_or(0);
        let mut axis = [0.0; 3];
        for (j, ax) in axis.iter_mut().enumerate() {
            *ax = r[j][i] + f64::from(u8::from(i == j));
        }
        let n = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        return axis.map(|x| x / n * theta);
    }
    let s = theta / (2.0 * theta.sin());
    vee.map(|v| v * s)
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation from the axis-angle part, translation copied unchanged.
    pub fn exp(p: &Pose6DoF) -> Result<Self> {
        if !p
            .axis_angle
            .iter()
            .chain(&p.translation)
            .all(|x| x.is_finite())
        {
            return Err(Error::invalid(format!("non-finite pose {p:?}")));
        }
        Ok(Se3 {
            rotation: so3_exp(p.axis_angle),
            translation: p.translation,
        })
    }

    pub fn log(&self) -> Pose6DoF {
        Pose6DoF {
            axis_angle: so3_log(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, x);
        [0, 1, 2].map(|i| r[i] + self.translation[i])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        Se3 {
            rotation: rt,
            translation: t.map(|x| -x),
        }
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut err = (determinant(&self.rotation) - 1.0).abs();
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                err = err.max((v - f64::from(u8::from(i == j))).abs());
            }
        }
        err
    }
}

/// Batched poses on a tape: rotation `[N,3,3]`, translation `[N,3,1]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
}

impl<'t> PoseVar<'t> {
    pub fn constant(tape: &'t crate::tensor::Tape, poses: &[Se3]) -> Self {
        let n = poses.len();
        let rot = poses
            .iter()
            .flat_map(|p| p.rotation.iter().flatten().copied())
            .collect();
        let tr = poses.iter().flat_map(|p| p.translation).collect();
        PoseVar {
            rotation: tape.constant(Tensor::from_parts(vec![n, 3, 3], rot)),
            translation: tape.constant(Tensor::from_parts(vec![n, 3, 1], tr)),
        }
    }

    /// Differentiable exponential map of `[N,6]` (axis-angle, translation).
    pub fn from_vector(v: Var<'t>) -> Result<Self> {
        let [n, 6] = v.shape()[..] else {
            return Err(Error::shape(
                "pose",
                format!("expected [N,6], got {:?}", v.shape()),
            ));
        };
        let r = v.slice(1, 0, 3)?;
        let t = v.slice(1, 3, 3)?.reshape(&[n, 3, 1])?;
        Ok(PoseVar {
            rotation: axis_angle_to_rotation(r)?,
            translation: t,
        })
    }

    pub fn values(&self) -> Vec<Se3> {
        let (r, t) = (self.rotation.value(), self.translation.value());
        r.data()
            .chunks(9)
            .zip(t.data().chunks(3))
            .map(|(r, t)| Se3 {
                rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                translation: [t[0], t[1], t[2]],
            })
            .collect()
    }
}

/// `[N,3]` axis-angle to `[N,3,3]` rotations via Rodrigues' formula, built
/// from tape primitives plus the two scalar Rodrigues coefficients.
pub fn axis_angle_to_rotation(r: Var<'_>) -> Result<Var<'_>> {
    let tape = r.tape();
    let [n, 3] = r.shape()[..] else {
        return Err(Error::shape(
            "axis_angle",
            format!("expected [N,3], got {:?}", r.shape()),
        ));
    };
    let theta_sq = r.mul(r)?.sum_axis(1, true)?;
    let a = theta_sq
        .unary_with(OpKind::Special("rodrigues_a"), rodrigues_a, |t, _| {
            rodrigues_a_dt(t)
        })
        .reshape(&[n, 1, 1])?;
    let b = theta_sq
        .unary_with(OpKind::Special("rodrigues_b"), rodrigues_b, |t, _| {
            rodrigues_b_dt(t)
        })
        .reshape(&[n, 1, 1])?;
    let c = |i: usize| r.slice(1, i, 1);
    let (x, y, z) = (c(0)?, c(1)?, c(2)?);
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let k = Var::concat(&[zero, z.neg(), y, z, zero, x.neg(), y.neg(), x, zero], 1)?
        .reshape(&[n, 3, 3])?;
    let k2 = k.matmul(k)?;
    let eye = tape.constant(Tensor::from_parts(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    eye.add(a.mul(k)?)?.add(b.mul(k2)?)
}

/// Output scaling of the pose head.
pub const POSE_SCALE: f64 = 0.01;

/// Five stride-2 3x3 convs (16..256 channels), global average pool, linear
/// to six numbers scaled by [`POSE_SCALE`].
#[derive(Clone, Debug)]
pub struct PoseNet {
    convs: Vec<Conv2d>,
    pub head: Linear,
}

pub const POSE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];

impl PoseNet {
    pub fn new(b: &mut ParamBuilder<'_>) -> Result<Self> {
        let mut cin = 6;
        let mut convs = Vec::new();
        for (i, &c) in POSE_CHANNELS.iter().enumerate() {
            convs.push(b.conv2d(&format!("conv{i}"), ConvSpec::new(cin, c, 3).stride(2))?);
            cin = c;
        }
        let head = b.linear("head", cin, 6)?;
        Ok(PoseNet { convs, head })
    }

    /// Raw head output before scaling, `[N,6]`.
    pub fn forward_unscaled<'t>(&self, p: &Bound<'t>, pair: Var<'t>) -> Result<Var<'t>> {
        let s = pair.shape();
        if s.len() != 4 || s[1] != 6 {
            return Err(Error::shape(
                "pose_forward",
                format!("expected [N,6,H,W], got {s:?}"),
            ));
        }
        let mut x = pair;
        for c in &self.convs {
            x = c.forward(p, x)?.gelu();
        }
        let pooled = x.mean_axis(3, false)?.mean_axis(2, false)?;
        self.head.forward(p, pooled)
    }

    /// `[N,6]` axis-angle + translation.
    pub fn forward<'t>(&self, p: &Bound<'t>, pair: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_unscaled(p, pair)?.scale(POSE_SCALE))
    }
}
