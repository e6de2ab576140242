//! Named parameter storage and the handful of layers the networks share.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors. Insertion order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Moves gradients for bound parameters into each tensor's `grad` slot.
    pub fn store_grads(&mut self, bound: &Bound<'_>, grads: &mut Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            t.set_grad(grads.take(v).map(Tensor::into_data))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None).expect("clearing a gradient cannot fail");
        }
    }

    /// Replaces values from `other` for every name both stores share.
    /// Shapes must agree; returns how many tensors were copied.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id(name) {
                let dst = &mut self.tensors[id.0];
                if dst.shape() != t.shape() {
                    return Err(Error::shape(
                        "load_from",
                        format!("{name}: {:?} vs {:?}", dst.shape(), t.shape()),
                    ));
                }
                dst.data_mut().copy_from_slice(t.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Parameters of a [`ParamStore`] as leaves of one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }
}

/// Creates parameters under a dotted name prefix with a shared RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// He-style fan-in scaled uniform: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn fan_in_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(shape, data)?;
        self.store.add(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add(self.full_name(name), Tensor::full(shape, value))
    }

    pub fn conv2d(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        let mut b = self.scope(name);
        let cin_g = spec.cin / spec.groups;
        let fan_in = cin_g * spec.k * spec.k;
        let weight = b.fan_in_uniform("weight", &[spec.cout, cin_g, spec.k, spec.k], fan_in)?;
        let bias = if spec.bias {
            Some(b.constant("bias", &[spec.cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.k / 2,
            groups: spec.groups,
        })
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let mut b = self.scope(name);
        let weight = b.fan_in_uniform("weight", &[din, dout], din)?;
        let bias = b.constant("bias", &[dout], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn layernorm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let mut b = self.scope(name);
        Ok(LayerNorm {
            gamma: b.constant("gamma", &[dim], 1.0)?,
            beta: b.constant("beta", &[dim], 0.0)?,
            eps: 1e-6,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            k,
            stride: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.cin;
        self
    }
}

/// "Same"-padded convolution (`padding = k / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            p.get(self.weight),
            self.bias.map(|b| p.get(b)),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(-1, p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn builder_names_and_order() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng, "net");
        let conv = b
            .scope("block")
            .conv2d("c1", ConvSpec::new(3, 4, 3))
            .unwrap();
        let lin = b.linear("fc", 4, 2).unwrap();
        let names: Vec<_> = store.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(
            names,
            [
                "net.block.c1.weight",
                "net.block.c1.bias",
                "net.fc.weight",
                "net.fc.bias"
            ]
        );
        assert_eq!(store.get(conv.weight).shape(), &[4, 3, 3, 3]);
        assert_eq!(store.get(lin.weight).shape(), &[4, 2]);
        assert_eq!(store.num_scalars(), 108 + 4 + 8 + 2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            ParamBuilder::new(&mut store, &mut rng, "")
                .linear("l", 5, 5)
                .unwrap();
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a.get(ParamId(0)).data(), b.get(ParamId(0)).data());
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(a.get(ParamId(0)).data().iter().all(|x| x.abs() < bound));
    }

    #[test]
    fn grads_land_in_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 3.0)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let loss = p.get(id).mul(p.get(id)).unwrap().sum();
        let mut g = tape.backward(loss).unwrap();
        store.store_grads(&p, &mut g).unwrap();
        assert_eq!(store.get(id).grad(), Some(&[6.0, 6.0][..]));
    }
}
