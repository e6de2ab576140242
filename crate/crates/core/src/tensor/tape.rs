use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Identifies the primitive that produced a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Neg,
    Scale,
    AddScalar,
    Abs,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Relu,
    Gelu,
    Sigmoid,
    Clamp,
    Special(&'static str),
    Sum,
    Mean,
    WeightedSum,
    SumAxis,
    MaxAxis,
    Reshape,
    Permute,
    Concat,
    Slice,
    MatMul,
    Softmax,
    LayerNorm,
    Conv2d,
    AvgPool2d,
    Pad2d,
    Upsample,
    GridSample,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Special(name) => f.write_str(name),
            other => {
                let s = format!("{other:?}");
                f.write_str(&s.to_lowercase())
            }
        }
    }
}

/// Vector-Jacobian product of one recorded primitive.
pub(crate) trait Backward {
    /// Returns one gradient per parent, `None` where `ctx.needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct BackwardCtx<'a> {
    pub parents: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    kind: OpKind,
    requires_grad: bool,
    backward: Option<Box<dyn Backward>>,
}

/// Records primitives in execution order. Parents always precede children, so
/// a reverse sweep over the node list is a valid topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    fault: Cell<Option<OpKind>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: Cell::new(None),
        }
    }

    /// Flips the sign of every gradient produced by `kind` during backward.
    /// Exists so the gradient checker can prove it notices a broken primitive.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad();
        self.push_node(OpKind::Leaf, tensor, Vec::new(), rg, None)
    }

    /// A leaf that gradients are collected for.
    pub fn var(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn push<B: Backward + 'static>(
        &self,
        kind: OpKind,
        value: Tensor,
        parents: &[Var<'_>],
        backward: B,
    ) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let rg = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<Box<dyn Backward>> = if rg { Some(Box::new(backward)) } else { None };
        self.push_node(kind, value, ids, rg, bw)
    }

    fn push_node(
        &self,
        kind: OpKind,
        mut value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<Box<dyn Backward>>,
    ) -> Var<'_> {
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            kind,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. The tape is consumed: saved
    /// intermediates are released and a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let value = self.value_of(loss.id);
        if value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let fault = self.fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parents: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &*nodes[p].value).collect();
                let needs = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let ctx = BackwardCtx {
                    parents,
                    output: &node.value,
                    needs,
                };
                let pgrads = bw.backward(&ctx, &g);
                debug_assert_eq!(pgrads.len(), node.parents.len(), "{}", node.kind);
                let flip = fault == Some(node.kind);
                for (&pid, pg) in node.parents.iter().zip(pgrads) {
                    let Some(mut pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    if flip {
                        pg.iter_mut().for_each(|x| *x = -*x);
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            } else if node.kind == OpKind::Leaf && node.requires_grad {
                grads[id] = Some(g);
            }
        }

        let mut out = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.kind == OpKind::Leaf && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients { by_id: out })
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
