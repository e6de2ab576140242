use super::reduce::split_axis;
use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{resolve_axis, Tensor, Var};

struct Softmax {
    dims: (usize, usize, usize),
}

impl Backward for Softmax {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = self.dims;
        let y = ctx.output.data();
        let mut out = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                for l in 0..len {
                    out[at(l)] = y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
        vec![Some(out)]
    }
}

struct LayerNorm {
    dims: (usize, usize, usize),
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNorm {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = self.dims;
        let gamma = ctx.parents[1].data();
        let mut gx = ctx.needs[0].then(|| vec![0.0; g.len()]);
        let mut gg = ctx.needs[1].then(|| vec![0.0; len]);
        let mut gb = ctx.needs[2].then(|| vec![0.0; len]);
        let n = len as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let s = o * inner + i;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for l in 0..len {
                    let k = at(l);
                    let d = g[k] * gamma[l];
                    mean_d += d;
                    mean_dx += d * self.xhat[k];
                    if let Some(gg) = gg.as_mut() {
                        gg[l] += g[k] * self.xhat[k];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[l] += g[k];
                    }
                }
                mean_d /= n;
                mean_dx /= n;
                if let Some(gx) = gx.as_mut() {
                    for l in 0..len {
                        let k = at(l);
                        gx[k] =
                            self.inv_std[s] * (g[k] * gamma[l] - mean_d - self.xhat[k] * mean_dx);
                    }
                }
            }
        }
        vec![gx, gg, gb]
    }
}

impl<'t> Var<'t> {
    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(self, axis: isize) -> Result<Var<'t>> {
        let v = self.value();
        let ax = resolve_axis(axis, v.ndim())?;
        let (outer, len, inner) = split_axis(v.shape(), ax);
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.tape.push(
            OpKind::Softmax,
            out,
            &[self],
            Softmax {
                dims: (outer, len, inner),
            },
        ))
    }

    /// Normalizes along `axis` to zero mean and unit variance (biased
    /// variance, `eps` inside the square root), then applies `gamma`/`beta`,
    /// which are 1-D with the axis length.
    pub fn layernorm(
        self,
        axis: isize,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>> {
        let v = self.value();
        let ax = resolve_axis(axis, v.ndim())?;
        let (outer, len, inner) = split_axis(v.shape(), ax);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [len] || bv.shape() != [len] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} must be [{len}]",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let x = v.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut y = vec![0.0; x.len()];
        let n = len as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| x[at(l)]).sum::<f64>() / n;
                let var = (0..len).map(|l| (x[at(l)] - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    let k = at(l);
                    xhat[k] = (x[k] - mean) * is;
                    y[k] = gv.data()[l] * xhat[k] + bv.data()[l];
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.tape.push(
            OpKind::LayerNorm,
            out,
            &[self, gamma, beta],
            LayerNorm {
                dims: (outer, len, inner),
                xhat,
                inv_std,
            },
        ))
    }
}
