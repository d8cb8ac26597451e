//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is a topological order by construction. [`Tape::backward`]
//! replays it once in reverse. Operations whose inputs need no gradient are
//! not recorded at all, so frozen sub-graphs cost nothing in the backward
//! pass.

mod gradcheck;
pub mod kernels;
mod primitives;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::grad_check;
pub use primitives::Primitive;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Context handed to [`Op::backward`].
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs_grad[i]` is false when input `i` leads to no trainable leaf;
    /// ops may skip computing that gradient.
    pub needs_grad: Vec<bool>,
}

/// A differentiable operation: computes the vector-Jacobian product for
/// each of its inputs given the gradient of its output.
pub trait Op {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` means no gradient contribution.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Single-threaded record of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn add_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf holding a copy of `t`. It receives a gradient on
    /// [`backward`](Self::backward) iff `t` is trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.trainable();
        let mut value = t.clone();
        value.clear_grad();
        self.add_node(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        })
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_trainable(false);
        self.add_node(Node {
            value: t,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
            grad: None,
        })
    }

    /// Records the result of an operation. The op is kept only if some
    /// input requires a gradient.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Op>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.add_node(Node {
            value,
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
            grad: None,
        })
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.value(v).data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.index).and_then(|n| n.grad.as_deref())
    }

    /// Adds the gradient of `v` into `t` (no-op for frozen tensors).
    pub fn grad_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    /// Propagates `∂loss/∂·` to every leaf reachable from `loss` that
    /// requires a gradient. Gradients of shared leaves accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let n = self.nodes[loss.index].value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        if !self.nodes[loss.index].requires_grad {
            return Ok(());
        }
        self.nodes[loss.index].grad = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            if self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = {
                let node = &self.nodes[i];
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.index].value).collect(),
                    output: &node.value,
                    needs_grad: node.inputs.iter().map(|v| self.nodes[v.index].requires_grad).collect(),
                };
                node.op.as_ref().expect("checked above").backward(&ctx, &grad)
            };
            let inputs = self.nodes[i].inputs.clone();
            for (v, g) in inputs.into_iter().zip(contributions) {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[v.index];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), target.value.len(), "vjp length");
                match &mut target.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => target.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
