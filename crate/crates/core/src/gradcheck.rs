//! Central finite-difference verification of every differentiable primitive
//! and of the composed view-synthesis chain.
//!
//! Each case builds `y = f(x_1, .., x_k)` from random inputs and reduces it
//! with fixed random weights, `L = sum(w * y)`. The analytic gradient of `L`
//! from one backward pass is compared with `(L(x + h e_i) - L(x - h e_i)) / 2h`
//! for every input element. The error of a trial is
//! `|g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2)`.
//!
//! Piecewise-smooth cases (the warp chain) also report a branch pattern:
//! bilinear cells, signs inside `abs`, clamp states. A draw whose `x +- h`
//! stencil changes the pattern sits on a kink where the central difference
//! is not a derivative; it is discarded, counted, and redrawn.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{reconstruct, DepthRange, Intrinsics};
use crate::losses::photometric;
use crate::pose::{axis_angle_to_rotation, PoseVar};
use crate::tensor::{OpKind, PadMode, Tape, Tensor, UpsampleMode, Var};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const CHAIN_TOL: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;

type Build = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;
type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Pattern = fn(&[Tensor]) -> Result<Vec<i64>>;

/// Draws allowed per accepted trial before a case gives up.
const MAX_DRAWS_PER_TRIAL: usize = 20;

/// One checked function. `kind` is the primitive the case exists for.
pub struct Case {
    pub name: &'static str,
    pub kind: OpKind,
    pub tolerance: f64,
    inputs: Inputs,
    build: Build,
    pattern: Option<Pattern>,
}

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Draws discarded because the stencil straddled a kink.
    pub rejected: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub results: Vec<OpResult>,
    pub elapsed: Duration,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(OpResult::passed)
    }

    pub fn failed(&self) -> Vec<String> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.clone())
            .collect()
    }

    pub fn format_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>7} {:>8} {:>12} {:>9}  result\n",
            "op", "trials", "kinks", "max rel err", "tol"
        );
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<22} {:>7} {:>8} {:>12.3e} {:>9.0e}  {}",
                r.name,
                r.trials,
                r.rejected,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = write!(
            out,
            "{} ops in {:.2} s",
            self.results.len(),
            self.elapsed.as_secs_f64()
        );
        out
    }

    /// `Err(GradCheck)` naming every failed op.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                failed: self.failed(),
            })
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values with magnitude in `[lo, hi]` and random sign, away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, d).expect("shape matches data")
}

/// Distinct values spaced at least 0.1 apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n)
        .map(|i| 0.2 * i as f64 + rng.gen_range(0.0..0.1))
        .collect();
    for i in (1..n).rev() {
        d.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, d).expect("shape matches data")
}

fn one<'t>(x: &[Var<'t>]) -> Var<'t> {
    x[0]
}

macro_rules! case {
    ($name:expr, $kind:expr, $inputs:expr, $build:expr) => {
        Case {
            name: $name,
            kind: $kind,
            tolerance: PRIMITIVE_TOL,
            inputs: $inputs,
            build: $build,
            pattern: None,
        }
    };
}

fn unary(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![uniform(rng, &[2, 5], -2.0, 2.0)]
}

fn positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![uniform(rng, &[2, 5], 0.5, 2.0)]
}

fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![away_from_zero(rng, &[2, 5], 0.1, 2.0)]
}

fn image(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![uniform(rng, &[1, 2, 4, 5], -1.0, 1.0)]
}

/// Grid coordinates at least 0.05 px from integers and inside the image.
fn grid_coords(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let base = rng.gen_range(0..max) as f64;
            base + rng.gen_range(0.05..0.95)
        })
        .collect()
}

/// The composed chain: disparity to depth, back-projection, rigid motion,
/// projection, bilinear warp and the SSIM + L1 photometric error.
fn chain_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (h, w) = (6, 7);
    let disp = uniform(rng, &[1, 1, h, w], 0.3, 0.7);
    let mut pose = uniform(rng, &[1, 6], -0.02, 0.02);
    pose.data_mut()[5] += 0.05;
    let source = uniform(rng, &[1, 3, h, w], 0.0, 1.0);
    let target = uniform(rng, &[1, 3, h, w], 0.0, 1.0);
    vec![disp, pose, source, target]
}

fn chain<'t>(x: &[Var<'t>]) -> Result<Var<'t>> {
    let k = Intrinsics::new(6.0, 6.0, 3.0, 2.5)?;
    let range = DepthRange::new(0.5, 10.0)?;
    let depth = crate::geometry::disp_to_depth(x[0], range)?;
    let pose = PoseVar::from_vector(x[1])?;
    let (recon, _) = reconstruct(x[2], depth, &pose, &k)?;
    photometric(recon, x[3], 0.85)
}

fn chain_pattern(x: &[Tensor]) -> Result<Vec<i64>> {
    let tape = Tape::new();
    let v: Vec<Var<'_>> = x.iter().map(|t| tape.constant(t.clone())).collect();
    let k = Intrinsics::new(6.0, 6.0, 3.0, 2.5)?;
    let depth = crate::geometry::disp_to_depth(v[0], DepthRange::new(0.5, 10.0)?)?;
    let pose = PoseVar::from_vector(v[1])?;
    let (recon, proj) = reconstruct(v[2], depth, &pose, &k)?;
    let mut p: Vec<i64> = proj
        .grid
        .value()
        .data()
        .iter()
        .map(|g| g.floor() as i64)
        .collect();
    let diff = recon.sub(v[3])?.value();
    p.extend(diff.data().iter().map(|d| i64::from(*d > 0.0)));
    let s = crate::losses::ssim(recon, v[3])?.value();
    p.extend(
        s.data()
            .iter()
            .map(|s| i64::from(*s > 1.0) - i64::from(*s < -1.0)),
    );
    Ok(p)
}

/// Every checked case, primitives first and the composed chain last.
pub fn cases() -> Vec<Case> {
    use OpKind as K;
    vec![
        case!(
            "add",
            K::Add,
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |x| x[0].add(x[1])
        ),
        case!(
            "sub",
            K::Sub,
            |r| vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 1], -1.0, 1.0)
            ],
            |x| x[0].sub(x[1])
        ),
        case!(
            "mul",
            K::Mul,
            |r| vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 3], -1.0, 1.0)
            ],
            |x| x[0].mul(x[1])
        ),
        case!(
            "div",
            K::Div,
            |r| vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                away_from_zero(r, &[2, 3], 0.5, 2.0)
            ],
            |x| x[0].div(x[1])
        ),
        case!(
            "minimum",
            K::Minimum,
            |r| {
                let a = uniform(r, &[2, 5], -1.0, 1.0);
                let gap = away_from_zero(r, &[2, 5], 0.05, 0.5);
                let b = Tensor::new(
                    &[2, 5],
                    a.data()
                        .iter()
                        .zip(gap.data())
                        .map(|(x, g)| x + g)
                        .collect(),
                )
                .unwrap();
                vec![a, b]
            },
            |x| x[0].minimum(x[1])
        ),
        case!("neg", K::Neg, unary, |x| Ok(one(x).neg())),
        case!("scale", K::Scale, unary, |x| Ok(one(x).scale(-1.7))),
        case!("add_scalar", K::AddScalar, unary, |x| Ok(
            one(x).add_scalar(0.3)
        )),
        case!("abs", K::Abs, kinked, |x| Ok(one(x).abs())),
        case!("exp", K::Exp, unary, |x| Ok(one(x).exp())),
        case!("log", K::Log, positive, |x| Ok(one(x).log())),
        case!("sqrt", K::Sqrt, positive, |x| Ok(one(x).sqrt())),
        case!("sin", K::Sin, unary, |x| Ok(one(x).sin())),
        case!("cos", K::Cos, unary, |x| Ok(one(x).cos())),
        case!("relu", K::Relu, kinked, |x| Ok(one(x).relu())),
        case!("gelu", K::Gelu, unary, |x| Ok(one(x).gelu())),
        case!("sigmoid", K::Sigmoid, unary, |x| Ok(one(x).sigmoid())),
        case!(
            "clamp",
            K::Clamp,
            |r| {
                let mut t = away_from_zero(r, &[2, 5], 0.05, 0.95);
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += v.signum() * if v.abs() > 0.5 { 0.05 } else { 0.0 });
                vec![t]
            },
            |x| Ok(one(x).clamp(-0.5, 0.5))
        ),
        case!(
            "rodrigues",
            K::Special("rodrigues_a"),
            |r| {
                let small = away_from_zero(r, &[1, 3], 0.01, 0.05);
                let large = away_from_zero(r, &[1, 3], 0.3, 1.5);
                vec![Tensor::new(&[2, 3], [small.data(), large.data()].concat()).unwrap()]
            },
            |x| axis_angle_to_rotation(x[0])
        ),
        case!("sum", K::Sum, unary, |x| Ok(one(x).sum())),
        case!("mean", K::Mean, unary, |x| Ok(one(x).mean())),
        case!("weighted_sum", K::WeightedSum, unary, |x| {
            let w = Tensor::new(&[2, 5], (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect())?;
            x[0].weighted_sum(&w)
        }),
        case!(
            "sum_axis",
            K::SumAxis,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |x| x[0].sum_axis(1, false)
        ),
        case!(
            "mean_axis",
            K::SumAxis,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |x| x[0].mean_axis(-1, true)
        ),
        case!(
            "max_axis",
            K::MaxAxis,
            |r| vec![distinct(r, &[2, 3, 4])],
            |x| x[0].max_axis(1, false)
        ),
        case!(
            "reshape",
            K::Reshape,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |x| x[0].reshape(&[4, 6])
        ),
        case!(
            "permute",
            K::Permute,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |x| x[0].permute(&[2, 0, 1])
        ),
        case!(
            "concat",
            K::Concat,
            |r| vec![
                uniform(r, &[2, 3, 2], -1.0, 1.0),
                uniform(r, &[2, 1, 2], -1.0, 1.0)
            ],
            |x| Var::concat(&[x[0], x[1]], 1)
        ),
        case!(
            "slice",
            K::Slice,
            |r| vec![uniform(r, &[2, 5, 3], -1.0, 1.0)],
            |x| x[0].slice(1, 1, 3)
        ),
        case!(
            "matmul",
            K::MatMul,
            |r| vec![
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0)
            ],
            |x| x[0].matmul(x[1])
        ),
        case!(
            "softmax",
            K::Softmax,
            |r| vec![uniform(r, &[3, 5], -2.0, 2.0)],
            |x| x[0].softmax(-1)
        ),
        case!(
            "layernorm",
            K::LayerNorm,
            |r| vec![
                uniform(r, &[3, 4], -2.0, 2.0),
                uniform(r, &[4], 0.5, 1.5),
                uniform(r, &[4], -0.5, 0.5)
            ],
            |x| x[0].layernorm(-1, x[1], x[2], 1e-6)
        ),
        case!(
            "conv2d",
            K::Conv2d,
            |r| vec![
                uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0)
            ],
            |x| x[0].conv2d(x[1], Some(x[2]), 1, 1, 1)
        ),
        case!(
            "conv2d_stride2",
            K::Conv2d,
            |r| vec![
                uniform(r, &[1, 2, 6, 5], -1.0, 1.0),
                uniform(r, &[2, 2, 3, 3], -1.0, 1.0)
            ],
            |x| x[0].conv2d(x[1], None, 2, 1, 1)
        ),
        case!(
            "conv2d_grouped",
            K::Conv2d,
            |r| vec![
                uniform(r, &[1, 4, 4, 4], -1.0, 1.0),
                uniform(r, &[4, 1, 3, 3], -1.0, 1.0),
                uniform(r, &[4], -1.0, 1.0)
            ],
            |x| x[0].conv2d(x[1], Some(x[2]), 1, 1, 4)
        ),
        case!("avg_pool2d", K::AvgPool2d, image, |x| x[0].avg_pool2d(3)),
        case!("pad2d_zero", K::Pad2d, image, |x| x[0]
            .pad2d(1, PadMode::Zero)),
        case!("pad2d_reflect", K::Pad2d, image, |x| x[0]
            .pad2d(1, PadMode::Reflect)),
        case!("pad2d_replicate", K::Pad2d, image, |x| x[0]
            .pad2d(1, PadMode::Replicate)),
        case!("upsample_nearest", K::Upsample, image, |x| x[0]
            .upsample(2, UpsampleMode::Nearest)),
        case!("upsample_bilinear", K::Upsample, image, |x| x[0]
            .upsample(2, UpsampleMode::Bilinear)),
        case!(
            "upsample_bilinear4",
            K::Upsample,
            |r| vec![uniform(r, &[1, 1, 3, 2], -1.0, 1.0)],
            |x| x[0].upsample(4, UpsampleMode::Bilinear)
        ),
        case!(
            "grid_sample",
            K::GridSample,
            |r| {
                let src = uniform(r, &[1, 2, 4, 5], -1.0, 1.0);
                let mut g = grid_coords(r, 9, 4);
                g.extend(grid_coords(r, 9, 3));
                vec![src, Tensor::new(&[1, 2, 3, 3], g).unwrap()]
            },
            |x| x[0].grid_sample(x[1])
        ),
        Case {
            name: "chain",
            kind: OpKind::GridSample,
            tolerance: CHAIN_TOL,
            inputs: chain_inputs,
            build: chain,
            pattern: Some(chain_pattern),
        },
    ]
}

fn objective(build: Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = build(&vars)?.value();
    Ok(y.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Relative error of one draw; `None` if the stencil straddles a kink.
pub fn trial(case: &Case, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Option<f64>> {
    let inputs = (case.inputs)(rng);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        (case.build)(&vars)?.shape()
    };
    let weights = Tensor::uniform(&probe, -1.0, 1.0, rng);

    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = (case.build)(&vars)?.weighted_sum(&weights)?;
    let grads = tape.backward(loss)?;

    let base_pattern = case.pattern.map(|f| f(&inputs)).transpose()?;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input is a gradient leaf");
        let mut x = inputs.clone();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut kink = false;
            x[i].data_mut()[j] = x0 + FD_STEP;
            let up = objective(case.build, &x, &weights)?;
            if let (Some(f), Some(b)) = (case.pattern, &base_pattern) {
                kink |= f(&x)? != *b;
            }
            x[i].data_mut()[j] = x0 - FD_STEP;
            let down = objective(case.build, &x, &weights)?;
            if let (Some(f), Some(b)) = (case.pattern, &base_pattern) {
                kink |= f(&x)? != *b;
            }
            x[i].data_mut()[j] = x0;
            if kink {
                return Ok(None);
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        return Ok(Some(0.0));
    }
    let rel = diff.sqrt() / scale;
    Ok(Some(if rel.is_nan() { f64::INFINITY } else { rel }))
}

/// Runs every case for `trials` trials. With `fault`, that primitive's
/// backward is sign-flipped on every analytic pass.
pub fn run_suite(seed: u64, trials: usize, fault: Option<OpKind>) -> Result<GradReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for (i, case) in cases().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut worst, mut done, mut rejected) = (0.0f64, 0, 0);
        while done < trials {
            if rejected >= MAX_DRAWS_PER_TRIAL * trials.max(1) {
                return Err(Error::invalid(format!(
                    "{}: no smooth draws in {rejected} attempts",
                    case.name
                )));
            }
            match trial(case, &mut rng, fault)? {
                Some(e) => {
                    worst = worst.max(e);
                    done += 1;
                }
                None => rejected += 1,
            }
        }
        results.push(OpResult {
            name: case.name.to_string(),
            trials,
            max_rel_error: worst,
            tolerance: case.tolerance,
            rejected,
        });
    }
    Ok(GradReport {
        results,
        elapsed: start.elapsed(),
    })
}

/// Looks up a primitive by case name (`conv2d`, `grid_sample`, ...) or by
/// its tape name (`gridsample`, `rodrigues_b`, ...).
pub fn fault_kind(name: &str) -> Option<OpKind> {
    let cs = cases();
    if let Some(c) = cs.iter().find(|c| c.name == name) {
        return Some(c.kind);
    }
    cs.iter()
        .map(|c| c.kind)
        .chain([OpKind::Special("rodrigues_b")])
        .find(|k| k.to_string() == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_known_mistake() {
        let cs = cases();
        let mul = cs.iter().find(|c| c.name == "mul").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(trial(mul, &mut rng, None).unwrap().unwrap() < 1e-8);
        assert!(trial(mul, &mut rng, Some(OpKind::Mul)).unwrap().unwrap() > 1.0);
    }

    #[test]
    fn weighted_sum_value() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let l = x.weighted_sum(&w).unwrap();
        assert_eq!(l.item(), 4.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), w.data());
        assert!(x.weighted_sum(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn names_resolve() {
        assert_eq!(fault_kind("conv2d"), Some(OpKind::Conv2d));
        assert_eq!(fault_kind("gridsample"), Some(OpKind::GridSample));
        assert_eq!(
            fault_kind("rodrigues_b"),
            Some(OpKind::Special("rodrigues_b"))
        );
        assert_eq!(fault_kind("nope"), None);
    }

    #[test]
    fn few_trials_pass() {
        let r = run_suite(3, 2, None).unwrap();
        assert!(r.passed(), "{}", r.format_table());
    }
}
