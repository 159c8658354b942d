//! Bilinear relation classifier and the training losses.

use crate::ccnet::ClusterStats;
use crate::document::PairLabels;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::init::{self, Rng64};
use crate::tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};

/// Column of the threshold class; relation `r` lives at column `r + 1`.
pub const TH: usize = 0;

/// Large negative logit offset that removes a class from a softmax.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub dim: usize,
    pub z_dim: usize,
    pub num_relations: usize,
    /// Split `z` into this many blocks and use a block-diagonal bilinear
    /// form; `1` is the full bilinear.
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub zs: Linear,
    pub zo: Linear,
    pub weight: String,
    pub bias: String,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, config: ClassifierConfig) -> Result<Self> {
        if config.groups == 0 || config.z_dim % config.groups != 0 {
            return Err(Error::Config(format!(
                "z_dim {} is not divisible into {} groups",
                config.z_dim, config.groups
            )));
        }
        let g = ParamGroup::Other;
        let width = config.hidden + config.dim;
        let block = config.z_dim / config.groups;
        let rows = config.groups * block * block;
        let classes = config.num_relations + 1;
        store.insert("cls.w", init::xavier(rng, rows, classes), g);
        store.insert("cls.b", Tensor::zeros(&[classes]), g);
        Ok(Classifier {
            zs: Linear::new(store, rng, "cls.zs", width, config.z_dim, g),
            zo: Linear::new(store, rng, "cls.zo", width, config.z_dim, g),
            weight: "cls.w".into(),
            bias: "cls.b".into(),
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_relations + 1
    }
}

/// Logits `[k, R + 1]` for `k` pairs from subject and object embeddings
/// (`[k, h]`) and their pair features (`[k, d]`).
pub fn classify(g: &mut Graph, store: &ParamStore, clf: &Classifier, h_es: Var, h_eo: Var, m: Var) -> Result<Var> {
    let cfg = &clf.config;
    let k = g.shape(m)[0];
    for (v, w) in [(h_es, cfg.hidden), (h_eo, cfg.hidden), (m, cfg.dim)] {
        if g.shape(v) != [k, w] {
            return Err(Error::Invalid(format!(
                "classify expects [{k}, {w}] input, got {:?}",
                g.shape(v)
            )));
        }
    }
    let xs = g.concat(&[h_es, m], 1)?;
    let xo = g.concat(&[h_eo, m], 1)?;
    let zs = clf.zs.forward(g, store, xs)?;
    let zs = g.tanh(zs)?;
    let zo = clf.zo.forward(g, store, xo)?;
    let zo = g.tanh(zo)?;
    let feats = if cfg.groups == 1 {
        g.outer_rows(zs, zo)?
    } else {
        let block = cfg.z_dim / cfg.groups;
        let mut parts = Vec::with_capacity(cfg.groups);
        for i in 0..cfg.groups {
            let a = g.slice(zs, 1, i * block, (i + 1) * block)?;
            let b = g.slice(zo, 1, i * block, (i + 1) * block)?;
            parts.push(g.outer_rows(a, b)?);
        }
        g.concat(&parts, 1)?
    };
    let w = g.param(store, &clf.weight)?;
    let b = g.param(store, &clf.bias)?;
    let logits = g.matmul(feats, w)?;
    Ok(g.add(logits, b)?)
}

/// Adaptive-thresholding loss averaged over the rows of `logits`.
/// `gold[i]` lists the relation ids (not columns) of row `i`.
pub fn atl_loss(g: &mut Graph, logits: Var, gold: &[&[usize]]) -> Result<Var> {
    let (k, c) = match g.shape(logits) {
        [k, c] => (*k, *c),
        s => return Err(Error::Invalid(format!("atl_loss expects [k, classes] logits, got {s:?}"))),
    };
    if gold.len() != k {
        return Err(Error::Invalid(format!("{} label rows for {k} logit rows", gold.len())));
    }
    let mut pos_mask = vec![MASKED; k * c];
    let mut neg_mask = vec![0.0; k * c];
    let mut pos_ind = vec![0.0; k * c];
    let mut th_ind = vec![0.0; k * c];
    for (i, rels) in gold.iter().enumerate() {
        pos_mask[i * c + TH] = 0.0;
        th_ind[i * c + TH] = 1.0;
        for &r in rels.iter() {
            if r + 1 >= c {
                return Err(Error::Invalid(format!("relation id {r} out of range for {c} classes")));
            }
            pos_mask[i * c + r + 1] = 0.0;
            neg_mask[i * c + r + 1] = MASKED;
            pos_ind[i * c + r + 1] = 1.0;
        }
    }
    let t = |v| Tensor::matrix(k, c, v).expect("k × c data");
    let pos_mask = g.constant(t(pos_mask));
    let neg_mask = g.constant(t(neg_mask));
    let pos_ind = g.constant(t(pos_ind));
    let th_ind = g.constant(t(th_ind));

    let l1 = g.add(logits, pos_mask)?;
    let l1 = g.log_softmax(l1, 1)?;
    let l1 = g.mul(l1, pos_ind)?;
    let l2 = g.add(logits, neg_mask)?;
    let l2 = g.log_softmax(l2, 1)?;
    let l2 = g.mul(l2, th_ind)?;
    let both = g.add(l1, l2)?;
    let total = g.sum_all(both)?;
    Ok(g.scale(total, -1.0 / k.max(1) as f64)?)
}

/// Relation ids whose logit strictly exceeds the threshold logit.
pub fn atl_predict(logits: &[f64]) -> Vec<usize> {
    let th = logits[TH];
    logits
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(_, &x)| x > th)
        .map(|(c, _)| c - 1)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringConfig {
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            mu: 1.0,
            lambda: 0.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// The three clustering terms before weighting.
#[derive(Clone, Copy, Debug)]
pub struct ClusteringTerms {
    pub dist: Var,
    pub var0: Var,
    pub var1: Var,
    pub total: Var,
}

/// `(max(0, margin − cos(centre, f)))²` summed over rows of `feats`.
fn hinge_sq_sum(g: &mut Graph, feats: Var, centre: Var, margin: f64) -> Result<Var> {
    let cos = g.cosine(feats, centre)?;
    let neg = g.scale(cos, -1.0)?;
    let gap = g.add_scalar(neg, margin)?;
    let h = g.hinge(gap)?;
    let sq = g.square(h)?;
    Ok(g.sum_all(sq)?)
}

/// Clustering loss on pair features `m` (`[N², d]`) around the centres in
/// `stats`.
pub fn clustering_loss(
    g: &mut Graph,
    stats: &ClusterStats,
    m: Var,
    cfg: &ClusteringConfig,
) -> Result<ClusteringTerms> {
    let cos = g.cosine(stats.v0, stats.v1)?;
    let gap = g.add_scalar(cos, cfg.mu)?;
    let h = g.hinge(gap)?;
    let dist = g.square(h)?;
    let dist = g.sum_all(dist)?;
    let pos = g.gather(m, &stats.pos)?;
    let var1 = hinge_sq_sum(g, pos, stats.v1, cfg.lambda)?;
    let neg = g.gather(m, &stats.neg)?;
    let var0 = hinge_sq_sum(g, neg, stats.v0, 2.0 * cfg.lambda)?;
    let a = g.scale(dist, cfg.alpha)?;
    let b = g.scale(var0, cfg.beta)?;
    let c = g.scale(var1, cfg.gamma)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(ClusteringTerms { dist, var0, var1, total })
}

/// Binary cross-entropy of each layer's bias probabilities (`[N², 1]`)
/// against pair relatedness, averaged over off-diagonal pairs and summed
/// over layers.
pub fn bias_loss(g: &mut Graph, probs: &[Var], labels: &PairLabels) -> Result<Var> {
    let idx = labels.off_diagonal();
    let y: Vec<f64> = idx.iter().map(|&p| f64::from(u8::from(!labels.relations[p].is_empty()))).collect();
    let k = idx.len();
    let mut total = g.constant(Tensor::scalar(0.0));
    if k == 0 {
        return Ok(total);
    }
    let y1 = g.constant(Tensor::matrix(k, 1, y.clone()).expect("k × 1"));
    let y0 = g.constant(Tensor::matrix(k, 1, y.iter().map(|v| 1.0 - v).collect()).expect("k × 1"));
    for &p in probs {
        let p = g.gather(p, &idx)?;
        let p = g.clamp(p, 1e-7, 1.0 - 1e-7)?;
        let lp = g.log(p)?;
        let q = g.scale(p, -1.0)?;
        let q = g.add_scalar(q, 1.0)?;
        let lq = g.log(q)?;
        let a = g.mul(y1, lp)?;
        let b = g.mul(y0, lq)?;
        let s = g.add(a, b)?;
        let s = g.sum_all(s)?;
        let s = g.scale(s, -1.0 / k as f64)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Which optional terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    pub bias: bool,
    pub cluster: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            bias: true,
            cluster: true,
        }
    }
}

/// `L_adap + L_bias + L_C`, with disabled or absent terms counted as 0.
pub fn total_loss(
    g: &mut Graph,
    adap: Var,
    bias: Option<Var>,
    cluster: Option<Var>,
    switches: LossSwitches,
) -> Result<Var> {
    let mut total = adap;
    if let (true, Some(b)) = (switches.bias, bias) {
        total = g.add(total, b)?;
    }
    if let (true, Some(c)) = (switches.cluster, cluster) {
        total = g.add(total, c)?;
    }
    Ok(total)
}
