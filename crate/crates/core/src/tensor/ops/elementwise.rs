use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{broadcast_shape, strides, Tensor, Var};

/// For every flat output position, the flat position in an input of shape
/// `input` broadcast against `out`. `None` when the shapes are equal.
fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let offset = out.len() - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; out.len()];
    for (i, &d) in input.iter().enumerate() {
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

impl BinOp {
    fn kind(self) -> OpKind {
        match self {
            BinOp::Add => OpKind::Add,
            BinOp::Sub => OpKind::Sub,
            BinOp::Mul => OpKind::Mul,
            BinOp::Div => OpKind::Div,
            BinOp::Min => OpKind::Minimum,
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            // ties resolve to the first operand
            BinOp::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
        }
    }
}

struct Binary {
    op: BinOp,
    map_a: Option<Vec<usize>>,
    map_b: Option<Vec<usize>>,
}

impl Backward for Binary {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
        let ia = |k: usize| self.map_a.as_ref().map_or(k, |m| m[k]);
        let ib = |k: usize| self.map_b.as_ref().map_or(k, |m| m[k]);
        let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
        for (k, &gk) in g.iter().enumerate() {
            let (ja, jb) = (ia(k), ib(k));
            let (da, db) = match self.op {
                BinOp::Add => (gk, gk),
                BinOp::Sub => (gk, -gk),
                BinOp::Mul => (gk * b[jb], gk * a[ja]),
                BinOp::Div => (gk / b[jb], -gk * a[ja] / (b[jb] * b[jb])),
                BinOp::Min => {
                    if a[ja] <= b[jb] {
                        (gk, 0.0)
                    } else {
                        (0.0, gk)
                    }
                }
            };
            if let Some(ga) = ga.as_mut() {
                ga[ja] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[jb] += db;
            }
        }
        vec![ga, gb]
    }
}

struct Unary {
    /// Derivative from (input, output).
    df: fn(f64, f64) -> f64,
}

impl Backward for Unary {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let y = ctx.output.data();
        let out = g
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&gk, (&xk, &yk))| gk * (self.df)(xk, yk))
            .collect();
        vec![Some(out)]
    }
}

struct Affine {
    scale: f64,
}

impl Backward for Affine {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|x| x * self.scale).collect())]
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: BinOp) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(
                "elementwise",
                format!("{:?} and {:?} do not broadcast", a.shape(), b.shape()),
            )
        })?;
        let map_a = broadcast_map(&out_shape, a.shape());
        let map_b = broadcast_map(&out_shape, b.shape());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = match (&map_a, &map_b) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect(),
            _ => (0..n)
                .map(|k| {
                    let x = ad[map_a.as_ref().map_or(k, |m| m[k])];
                    let y = bd[map_b.as_ref().map_or(k, |m| m[k])];
                    op.apply(x, y)
                })
                .collect(),
        };
        let out = Tensor::from_parts(out_shape, data);
        Ok(self
            .tape
            .push(op.kind(), out, &[self, other], Binary { op, map_a, map_b }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Mul)
    }

    /// Division by zero yields ±inf or NaN per IEEE 754; it is not trapped.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise minimum. Gradient goes only to the smaller operand, and to
    /// `self` on ties.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Min)
    }

    pub(crate) fn unary_with(
        self,
        kind: OpKind,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(kind, out, &[self], Unary { df })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        let kind = if c == -1.0 {
            OpKind::Neg
        } else {
            OpKind::Scale
        };
        self.tape.push(kind, out, &[self], Affine { scale: c })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape
            .push(OpKind::AddScalar, out, &[self], Affine { scale: 1.0 })
    }

    pub fn abs(self) -> Var<'t> {
        self.unary_with(OpKind::Abs, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_with(OpKind::Exp, f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'t> {
        self.unary_with(OpKind::Log, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary_with(OpKind::Sqrt, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary_with(OpKind::Sin, f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary_with(OpKind::Cos, f64::cos, |x, _| -x.sin())
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_with(
            OpKind::Relu,
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Var<'t> {
        self.unary_with(
            OpKind::Gelu,
            |x| x * std_normal_cdf(x),
            |x, _| std_normal_cdf(x) + x * std_normal_pdf(x),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_with(OpKind::Sigmoid, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        // fn pointers cannot capture, so the bounds are recovered from the
        // output: an element was clamped iff the output differs from the input.
        self.unary_with(
            OpKind::Clamp,
            move |x| x.clamp(lo, hi),
            |x, y| {
                if x == y {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }
}
