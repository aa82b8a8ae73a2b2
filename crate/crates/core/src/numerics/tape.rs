// Computation record: forward operations are appended in execution order and
// replayed in reverse by `backward`. Every node owns its value; gradients are
// kept only for leaves, intermediate gradients are released as the reverse
// sweep passes them.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub channels_last: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        p: usize,
        q: usize,
        r: usize,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        q: usize,
        r: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `b` is broadcast over the leading axes of `a`.
    AddSuffix {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f64,
    },
    Transpose {
        a: Var,
        batch: usize,
        p: usize,
        q: usize,
    },
    Reshape {
        a: Var,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Softmax {
        a: Var,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        width: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Gelu {
        a: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Affine { .. } => "affine",
            Op::Add { .. } => "add",
            Op::AddSuffix { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Conv1d { .. } => "conv1d_causal",
            Op::Mse { .. } => "mse_loss",
            Op::Sum { .. } => "sum",
            Op::Dropout { .. } => "dropout",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::AddSuffix { a, b } => vec![a, b],
            Op::Affine { x, w, b, .. } => std::iter::once(x).chain([w]).chain(b).collect(),
            Op::Conv1d { x, w, bias, .. } => std::iter::once(x).chain([w]).chain(bias).collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Mse { pred, target } => vec![pred, target],
            Op::Scale { a, .. }
            | Op::Transpose { a, .. }
            | Op::Reshape { a }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Softmax { a, .. }
            | Op::Gelu { a }
            | Op::Sum { a }
            | Op::Dropout { a, .. } => vec![a],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Reverse-mode differentiation record.
///
/// Forward operations are methods on the tape (see the `ops` module) and
/// return [`Var`] handles. After [`Tape::backward`], leaves created with
/// [`Tape::param`] carry their total derivative. A second `backward` without
/// an intervening [`Tape::zero_grad`] is an error, never a silent
/// accumulation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a constant input. It never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    /// Records a trainable input whose gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of recorded entries, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn record(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = node_op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, requires_grad, node_op))
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates derivatives of the scalar `loss` to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not recorded on this tape".into()))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(node.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            super::backward::propagate(&self.nodes, i, g.data(), &mut self.grads);
        }
        // Gradients are defined for trainable leaves only.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }
}
