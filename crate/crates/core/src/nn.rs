//! Small layer helpers that bind parameter names to graph ops.

use crate::tensor::init::{self, Rng64};
use crate::tensor::{Graph, ParamGroup, ParamStore, Result, Tensor, Var};

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.insert(&weight, init::xavier(rng, in_dim, out_dim), group);
        store.insert(&bias, Tensor::zeros(&[out_dim]), group);
        Linear {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// `y = x·W`, for projections whose offset would cancel downstream.
    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut Rng64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = format!("{name}.w");
        store.insert(&weight, init::xavier(rng, in_dim, out_dim), group);
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learnable gain and offset for layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = format!("{name}.g");
        let beta = format!("{name}.b");
        store.insert(&gamma, Tensor::full(&[dim], 1.0), group);
        store.insert(&beta, Tensor::zeros(&[dim]), group);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng64,
        name: &str,
        dims: (usize, usize, usize),
        group: ParamGroup,
    ) -> Self {
        let (i, h, o) = dims;
        FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.l1"), i, h, group),
            out: Linear::new(store, rng, &format!("{name}.l2"), h, o, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }
}
