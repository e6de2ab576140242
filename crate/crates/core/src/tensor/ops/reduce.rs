use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{resolve_axis, Tensor, Var};

/// `shape` viewed as (outer, len, inner) around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

struct SumAll {
    scale: f64,
}

impl Backward for SumAll {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; ctx.parents[0].numel()])]
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}

impl Backward for WeightedSum {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.weights.iter().map(|w| w * g[0]).collect())]
    }
}

struct SumAxis {
    dims: (usize, usize, usize),
    scale: f64,
}

impl Backward for SumAxis {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = self.dims;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let dst = &mut out[(o * len + l) * inner..][..inner];
                dst.iter_mut()
                    .zip(&g[o * inner..][..inner])
                    .for_each(|(d, &s)| *d = s * self.scale);
            }
        }
        vec![Some(out)]
    }
}

struct MaxAxis {
    dims: (usize, usize, usize),
    argmax: Vec<usize>,
}

impl Backward for MaxAxis {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = self.dims;
        let mut out = vec![0.0; outer * len * inner];
        for (k, (&gk, &l)) in g.iter().zip(&self.argmax).enumerate() {
            let (o, i) = (k / inner, k % inner);
            out[(o * len + l) * inner + i] = gk;
        }
        vec![Some(out)]
    }
}

impl<'t> Var<'t> {
    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum());
        self.tape
            .push(OpKind::Sum, out, &[self], SumAll { scale: 1.0 })
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let n = v.numel() as f64;
        let out = Tensor::scalar(v.sum() / n);
        self.tape
            .push(OpKind::Mean, out, &[self], SumAll { scale: 1.0 / n })
    }

    /// `sum(w * self)` with constant weights of the same shape.
    pub fn weighted_sum(self, weights: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs weights {:?}", v.shape(), weights.shape()),
            ));
        }
        let total = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.tape.push(
            OpKind::WeightedSum,
            Tensor::scalar(total),
            &[self],
            WeightedSum {
                weights: weights.data().to_vec(),
            },
        ))
    }

    fn reduce_axis(self, axis: isize, keepdim: bool, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let ax = resolve_axis(axis, v.ndim())?;
        let (outer, len, inner) = split_axis(v.shape(), ax);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= scale);
        }
        let out = Tensor::from_parts(reduced_shape(v.shape(), ax, keepdim), out);
        Ok(self.tape.push(
            OpKind::SumAxis,
            out,
            &[self],
            SumAxis {
                dims: (outer, len, inner),
                scale,
            },
        ))
    }

    pub fn sum_axis(self, axis: isize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, keepdim, false)
    }

    pub fn mean_axis(self, axis: isize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, keepdim, true)
    }

    /// Maximum along `axis`; gradient goes to the first maximal element.
    pub fn max_axis(self, axis: isize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        let ax = resolve_axis(axis, v.ndim())?;
        let (outer, len, inner) = split_axis(v.shape(), ax);
        let d = v.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let x = d[(o * len + l) * inner + i];
                    let k = o * inner + i;
                    if x > out[k] {
                        out[k] = x;
                        argmax[k] = l;
                    }
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(v.shape(), ax, keepdim), out);
        Ok(self.tape.push(
            OpKind::MaxAxis,
            out,
            &[self],
            MaxAxis {
                dims: (outer, len, inner),
                argmax,
            },
        ))
    }
}
