//! Criss-cross attention over the entity-pair matrix, stacked densely.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;

use crate::document::PairLabels;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::pair_matrix::EntityPairMatrix;
use crate::tensor::init::Rng64;
use crate::tensor::{Graph, ParamGroup, ParamStore, Var};

/// Positions `(row, col)` that pair `(s, o)` attends to: row `s` left to
/// right, then column `o` top to bottom, and in expanded mode also column `s`
/// and row `o`, each position listed once.
pub fn cca_positions(s: usize, o: usize, n: usize, expanded: bool) -> Result<Vec<(usize, usize)>> {
    if s >= n || o >= n {
        return Err(Error::Invalid(format!("pair ({s}, {o}) out of range for {n} entities")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(if expanded { 4 * n } else { 2 * n });
    let mut push = |p: (usize, usize)| {
        if seen.insert(p) {
            out.push(p);
        }
    };
    (0..n).for_each(|i| push((s, i)));
    (0..n).for_each(|i| push((i, o)));
    if expanded {
        (0..n).for_each(|i| push((i, s)));
        (0..n).for_each(|i| push((o, i)));
    }
    Ok(out)
}

/// Flat neighbor lists for every pair of an `n × n` matrix.
pub fn neighbor_lists(n: usize, expanded: bool) -> Vec<Vec<usize>> {
    (0..n * n)
        .map(|p| {
            cca_positions(p / n, p % n, n, expanded)
                .expect("in range")
                .into_iter()
                .map(|(a, b)| a * n + b)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseConfig {
    /// Number of criss-cross layers; 0 makes the block an identity.
    pub layers: usize,
    pub dim: usize,
    pub attn_dim: usize,
    pub bias_hidden: usize,
    pub expanded: bool,
    pub use_bias: bool,
    /// `false` chains layers directly (recurrent mode) without transitions.
    pub dense: bool,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            layers: 3,
            dim: 64,
            attn_dim: 64,
            bias_hidden: 64,
            expanded: true,
            use_bias: true,
            dense: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CcaLayer {
    pub index: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub bias: FeedForward,
    pub residual: Linear,
    pub attn_dim: usize,
}

impl CcaLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, index: usize, cfg: &DenseConfig) -> Self {
        let p = format!("ccnet.layer{index}");
        let g = ParamGroup::Other;
        let d = cfg.dim;
        CcaLayer {
            index,
            query: Linear::new(store, rng, &format!("{p}.q"), d, cfg.attn_dim, g),
            key: Linear::without_bias(store, rng, &format!("{p}.k"), d, cfg.attn_dim, g),
            value: Linear::new(store, rng, &format!("{p}.v"), d, d, g),
            bias: FeedForward::new(store, rng, &format!("{p}.bias"), (d, cfg.bias_hidden, 1), g),
            residual: Linear::new(store, rng, &format!("{p}.res"), d, d, g),
            attn_dim: cfg.attn_dim,
        }
    }
}

/// Per-pair affine projection plus tanh back to width `d`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub proj: Linear,
}

impl Transition {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, name: &str, d_cat: usize, d: usize) -> Self {
        Transition {
            proj: Linear::new(store, rng, name, d_cat, d, ParamGroup::Other),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.shape(x).last().copied().unwrap_or(0);
        if w != self.proj.in_dim {
            return Err(Error::Invalid(format!(
                "transition expects width {}, got {w}",
                self.proj.in_dim
            )));
        }
        let y = self.proj.forward(g, store, x)?;
        Ok(g.tanh(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub config: DenseConfig,
    pub layers: Vec<CcaLayer>,
    /// `transitions[i]` feeds layer `i + 2` from `d·(i + 2)` concatenated
    /// features.
    pub transitions: Vec<Transition>,
    pub final_transition: Option<Transition>,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, config: DenseConfig) -> Self {
        let layers = (0..config.layers).map(|l| CcaLayer::new(store, rng, l, &config)).collect();
        let d = config.dim;
        let (transitions, final_transition) = if config.dense && config.layers > 0 {
            let t = (2..=config.layers)
                .map(|l| Transition::new(store, rng, &format!("ccnet.trans{l}"), d * l, d))
                .collect();
            let f = Transition::new(store, rng, "ccnet.trans_final", d * (config.layers + 1), d);
            (t, Some(f))
        } else {
            (Vec::new(), None)
        };
        DenseBlock {
            config,
            layers,
            transitions,
            final_transition,
        }
    }
}

/// Everything one criss-cross layer produced.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `[N², d]` updated features.
    pub out: Var,
    /// The attention node; its saved weights form the layer's trace.
    pub attention: Var,
    /// `[N², 1]` raw bias logits, one per pair, when bias is enabled.
    pub bias_logits: Option<Var>,
    pub neighbors: Arc<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct DenseOutput {
    pub m: EntityPairMatrix,
    pub layers: Vec<LayerOutput>,
}

/// Bias logit and its sigmoid for each row of `f` (`[k, d]` → `[k, 1]`).
pub fn pair_bias(g: &mut Graph, store: &ParamStore, layer: &CcaLayer, f: Var) -> Result<(Var, Var)> {
    let bias = layer.bias.forward(g, store, f)?;
    let prob = g.sigmoid(bias)?;
    Ok((bias, prob))
}

/// One criss-cross layer over `m_in` (`[N², d]`), computed entirely from the
/// input snapshot.
pub fn cca_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CcaLayer,
    m_in: Var,
    n: usize,
    expanded: bool,
    use_bias: bool,
) -> Result<LayerOutput> {
    let shape = g.shape(m_in).to_vec();
    if shape.len() != 2 || shape[0] != n * n {
        return Err(Error::Invalid(format!("cca_layer expects [{}, d], got {shape:?}", n * n)));
    }
    let width = shape[1];
    if let Some(p) = g.value(m_in).data().iter().position(|x| !x.is_finite()) {
        let pair = p / width;
        return Err(Error::Invalid(format!(
            "non-finite feature at pair ({}, {}) entering layer {}",
            pair / n,
            pair % n,
            layer.index
        )));
    }
    let q = layer.query.forward(g, store, m_in)?;
    let k = layer.key.forward(g, store, m_in)?;
    let v = layer.value.forward(g, store, m_in)?;
    let bias_logits = if use_bias {
        Some(pair_bias(g, store, layer, m_in)?.0)
    } else {
        None
    };
    let neighbors = Arc::new(neighbor_lists(n, expanded));
    let scale = 1.0 / (layer.attn_dim as f64).sqrt();
    let attention = g.sparse_attention(q, k, v, bias_logits, neighbors.clone(), scale)?;
    let res = layer.residual.forward(g, store, m_in)?;
    let out = g.add(attention, res)?;
    Ok(LayerOutput {
        out,
        attention,
        bias_logits,
        neighbors,
    })
}

/// Runs the block. With zero layers `M` is returned unchanged.
pub fn dense_forward(g: &mut Graph, store: &ParamStore, block: &DenseBlock, m: EntityPairMatrix) -> Result<DenseOutput> {
    let cfg = &block.config;
    if cfg.layers == 0 {
        return Ok(DenseOutput { m, layers: Vec::new() });
    }
    if m.d != cfg.dim {
        return Err(Error::Invalid(format!("pair matrix width {} != block width {}", m.d, cfg.dim)));
    }
    let mut outputs: Vec<LayerOutput> = Vec::with_capacity(cfg.layers);
    let mut collected = vec![m.m];
    let mut input = m.m;
    for (l, layer) in block.layers.iter().enumerate() {
        if l > 0 {
            input = if cfg.dense {
                let cat = g.concat(&collected, 1)?;
                block.transitions[l - 1].forward(g, store, cat)?
            } else {
                outputs[l - 1].out
            };
        }
        let o = cca_layer(g, store, layer, input, m.n, cfg.expanded, cfg.use_bias)?;
        collected.push(o.out);
        outputs.push(o);
    }
    let last = match &block.final_transition {
        Some(t) => {
            let cat = g.concat(&collected, 1)?;
            t.forward(g, store, cat)?
        }
        None => outputs[outputs.len() - 1].out,
    };
    Ok(DenseOutput {
        m: EntityPairMatrix { m: last, ..m },
        layers: outputs,
    })
}

/// Cluster centres of related (`v1`) and unrelated (`v0`) pairs.
#[derive(Clone, Debug)]
pub struct ClusterStats {
    /// `[1, d]` mean over unrelated pairs.
    pub v0: Var,
    /// `[1, d]` mean over related pairs.
    pub v1: Var,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Returns `None` when the document lacks either related or unrelated
/// off-diagonal pairs.
pub fn clustering_stats(g: &mut Graph, m: Var, labels: &PairLabels) -> Result<Option<ClusterStats>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = labels
        .off_diagonal()
        .into_iter()
        .partition(|&p| !labels.relations[p].is_empty());
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let d = g.shape(m)[1];
    let mut centre = |idx: &[usize]| -> Result<Var> {
        let rows = g.gather(m, idx)?;
        let mean = g.mean(rows, 0)?;
        Ok(g.reshape(mean, &[1, d])?)
    };
    let v1 = centre(&pos)?;
    let v0 = centre(&neg)?;
    Ok(Some(ClusterStats { v0, v1, pos, neg }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairAttention {
    pub layer: usize,
    pub s: usize,
    pub o: usize,
    pub positions: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

/// Attention distributions of every layer and pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub n: usize,
    pub records: Vec<PairAttention>,
}

impl AttentionTrace {
    pub fn from_output(g: &Graph, out: &DenseOutput) -> Self {
        let n = out.m.n;
        let mut records = Vec::new();
        for (l, layer) in out.layers.iter().enumerate() {
            let Some(weights) = g.attention_weights(layer.attention) else {
                continue;
            };
            for (p, w) in weights.iter().enumerate() {
                records.push(PairAttention {
                    layer: l,
                    s: p / n,
                    o: p % n,
                    positions: layer.neighbors[p].iter().map(|&q| (q / n, q % n)).collect(),
                    weights: w.clone(),
                });
            }
        }
        AttentionTrace { n, records }
    }

    pub fn get(&self, layer: usize, s: usize, o: usize) -> Option<&PairAttention> {
        self.records.iter().find(|r| r.layer == layer && r.s == s && r.o == o)
    }

    /// One JSON object per line, one line per layer and pair.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }
}
