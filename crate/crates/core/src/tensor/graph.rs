use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Deliberate backward corruption, used only to prove that gradient checks
/// catch a broken derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhBackward,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gather { input: Var, indices: Vec<usize> },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LogSumExp { input: Var, axis: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Cosine { a: Var, b: Var, degenerate: Vec<bool> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    OuterRows(Var, Var),
    SparseAttention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        neighbors: Arc<Vec<Vec<usize>>>,
        scale: f64,
        weights: Vec<Vec<f64>>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Define-by-run tape. Nodes are stored in execution order, which is a valid
/// topological order; `backward` walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    pub(crate) fault: Option<Fault>,
    degenerate_cosines: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Pulls a parameter into the graph. Repeated requests for the same name
    /// return the same handle, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters pulled into this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
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

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// Attention weights saved by a `sparse_attention` node, one distribution
    /// per query row.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::SparseAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Number of cosine evaluations that hit a zero-norm vector and were
    /// treated as 0.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    pub(crate) fn note_degenerate_cosines(&mut self, n: usize) {
        self.degenerate_cosines += n;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result. The op is kept only if some input needs a
    /// gradient (attention ops are always kept so their weights stay
    /// readable); otherwise the output is stored as a constant.
    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad || matches!(op, Op::SparseAttention { .. }) {
            op
        } else {
            Op::Leaf
        };
        Ok(self.push_raw(value, requires_grad, op))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to any already
    /// present, so repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dout, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&dout).for_each(|(a, b)| *a += b),
                None => node.grad = Some(dout),
            }
        }
        Ok(())
    }
}
