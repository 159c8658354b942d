//! The entity-pair matrix: one relation feature vector per ordered pair.

use crate::encoding::EncodedDocument;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::tensor::init::Rng64;
use crate::tensor::{Graph, ParamGroup, ParamStore, Var};

/// `N_e × N_e × d` features stored row-major as `[N_e², d]`; row `s·N_e + o`
/// holds pair `(s, o)`.
#[derive(Clone, Copy, Debug)]
pub struct EntityPairMatrix {
    pub n: usize,
    pub d: usize,
    pub m: Var,
}

impl EntityPairMatrix {
    pub fn index(&self, s: usize, o: usize) -> usize {
        s * self.n + o
    }

    /// `true` on self-pairs, which never enter losses or predictions.
    pub fn diagonal_mask(&self) -> Vec<bool> {
        (0..self.n * self.n).map(|p| p / self.n == p % self.n).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub ws: Linear,
    pub wo: Linear,
    pub ffn: FeedForward,
    pub hidden: usize,
    pub dim: usize,
    /// Divide `A_s ⊙ A_o` by its total before pooling tokens.
    pub normalize_context: bool,
}

impl PairFeatures {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, hidden: usize, dim: usize, normalize_context: bool) -> Self {
        let g = ParamGroup::Other;
        PairFeatures {
            ws: Linear::new(store, rng, "pair.ws", 3 * hidden, dim, g),
            wo: Linear::new(store, rng, "pair.wo", 3 * hidden, dim, g),
            ffn: FeedForward::new(store, rng, "pair.ffn", (2 * dim, 2 * dim, dim), g),
            hidden,
            dim,
            normalize_context,
        }
    }
}

/// `c_{s,o} = Σ_i A_{s,i} A_{o,i} h_i` for a batch of pairs: `attn_s` and
/// `attn_o` are `[k, L']`, `h` is `[L', h]`, the result `[k, h]`.
pub fn pair_context_rows(g: &mut Graph, h: Var, attn_s: Var, attn_o: Var, normalize: bool) -> Result<Var> {
    let mut w = g.mul(attn_s, attn_o)?;
    if normalize {
        let k = g.shape(w)[0];
        let z = g.sum(w, 1)?;
        let z = g.reshape(z, &[k, 1])?;
        let z = g.add_scalar(z, 1e-12)?;
        w = g.div(w, z)?;
    }
    Ok(g.matmul(w, h)?)
}

/// Pair-aware context vector `[h]` for a single `(s, o)`.
pub fn pair_context(g: &mut Graph, enc: &EncodedDocument, s: usize, o: usize, normalize: bool) -> Result<Var> {
    let attn = enc
        .entity_attn
        .ok_or_else(|| Error::Invalid("document has no entities".into()))?;
    check_pair(enc.num_entities, s, o)?;
    let a_s = g.gather(attn, &[s])?;
    let a_o = g.gather(attn, &[o])?;
    let c = pair_context_rows(g, enc.h, a_s, a_o, normalize)?;
    let w = g.shape(c)[1];
    Ok(g.reshape(c, &[w])?)
}

/// Relation features for a batch of pairs; every input is `[k, h]` and the
/// output is `[k, d]`.
pub fn relation_feature(
    g: &mut Graph,
    store: &ParamStore,
    params: &PairFeatures,
    h_es: Var,
    h_eo: Var,
    h_doc: Var,
    c: Var,
) -> Result<Var> {
    let shapes = [g.shape(h_es), g.shape(h_eo), g.shape(h_doc), g.shape(c)];
    let want = shapes[0].to_vec();
    if want.len() != 2 || want[1] != params.hidden || shapes.iter().any(|s| *s != want.as_slice()) {
        return Err(Error::Invalid(format!(
            "relation_feature expects four [k, {}] inputs, got {:?}",
            params.hidden,
            shapes.iter().map(|s| s.to_vec()).collect::<Vec<_>>()
        )));
    }
    let xs = g.concat(&[h_es, h_doc, c], 1)?;
    let xo = g.concat(&[h_eo, h_doc, c], 1)?;
    let us = params.ws.forward(g, store, xs)?;
    let us = g.tanh(us)?;
    let uo = params.wo.forward(g, store, xo)?;
    let uo = g.tanh(uo)?;
    let u = g.concat(&[us, uo], 1)?;
    Ok(params.ffn.forward(g, store, u)?)
}

/// Builds `M` over every ordered pair, self-pairs included.
pub fn build_matrix(
    g: &mut Graph,
    store: &ParamStore,
    params: &PairFeatures,
    enc: &EncodedDocument,
) -> Result<EntityPairMatrix> {
    let n = enc.num_entities;
    let (emb, attn) = match (enc.entity_emb, enc.entity_attn) {
        (Some(e), Some(a)) if n > 0 => (e, a),
        _ => return Err(Error::Invalid("cannot build a pair matrix without entities".into())),
    };
    let subj: Vec<usize> = (0..n * n).map(|p| p / n).collect();
    let obj: Vec<usize> = (0..n * n).map(|p| p % n).collect();
    let h_es = g.gather(emb, &subj)?;
    let h_eo = g.gather(emb, &obj)?;
    let h_doc = g.gather(enc.h_doc, &vec![0; n * n])?;
    let a_s = g.gather(attn, &subj)?;
    let a_o = g.gather(attn, &obj)?;
    let c = pair_context_rows(g, enc.h, a_s, a_o, params.normalize_context)?;
    let m = relation_feature(g, store, params, h_es, h_eo, h_doc, c)?;
    Ok(EntityPairMatrix { n, d: params.dim, m })
}

fn check_pair(n: usize, s: usize, o: usize) -> Result<()> {
    if s >= n || o >= n {
        return Err(Error::Invalid(format!("pair ({s}, {o}) out of range for {n} entities")));
    }
    Ok(())
}
