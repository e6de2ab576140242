//! AdamW: adaptive moments with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moments are stored in parameter order, shaped like their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter holding a gradient. `lr` maps a
    /// parameter name to its learning rate.
    ///
    /// With `t` the new step count:
    /// `p -= lr wd p; m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;`
    /// `p -= lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
    pub fn update(&mut self, params: &mut ParamStore, lr: impl Fn(&str) -> f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let rate = lr(params.name(id));
            let p = params.get_mut(id);
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if self.m[k].shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("moment {:?} vs {:?}", self.m[k].shape(), p.shape()),
                ));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *x -= rate * c.weight_decay * *x;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *x -= rate * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|x| x * s).collect();
                p.set_grad(Some(scaled))?;
            }
        }
    }
    Ok(norm)
}
