//! Entity markers, a small post-LN transformer encoder, and entity-level
//! pooling of its outputs.

use crate::document::Document;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::tensor::init::{self, Rng64};
use crate::tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::vocab::{self, Vocab};

/// A document with `[CLS]` prepended and every mention wrapped in its
/// entity's marker pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedDocument {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// `marker_index[e][j]` is the position of the start marker of mention `j`
    /// of entity `e`.
    pub marker_index: Vec<Vec<usize>>,
    /// Position of each original token in the marked sequence.
    pub original_positions: Vec<usize>,
}

impl MarkedDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Recovers the unmarked token sequence.
    pub fn strip_markers(&self) -> Vec<String> {
        self.original_positions.iter().map(|&p| self.tokens[p].clone()).collect()
    }
}

pub fn insert_markers(doc: &Document, vocab: &Vocab) -> Result<MarkedDocument> {
    let len = doc.tokens.len();
    // (start, end, entity, mention)
    let mut spans = Vec::new();
    for (e, ent) in doc.entities.iter().enumerate() {
        if ent.mentions.is_empty() {
            return Err(Error::Document(format!("{}: entity {e} has no mentions", doc.doc_id)));
        }
        for (j, m) in ent.mentions.iter().enumerate() {
            if m.start >= m.end || m.end > len {
                return Err(Error::Document(format!(
                    "{}: mention [{}, {}) outside document of length {len}",
                    doc.doc_id, m.start, m.end
                )));
            }
            spans.push((m.start, m.end, e, j));
        }
    }
    spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));

    let marker_id = |tok: &str, e: usize| {
        vocab
            .id(tok)
            .ok_or_else(|| Error::Vocab(format!("no marker `{tok}` for entity {e} in vocabulary")))
    };

    let mut tokens = vec![vocab::START.to_string()];
    let mut ids = vec![vocab.id_or_unk(vocab::START)];
    let mut marker_index: Vec<Vec<usize>> = doc.entities.iter().map(|e| vec![0; e.mentions.len()]).collect();
    let mut original_positions = Vec::with_capacity(len);
    // Open spans in opening order; closes happen in reverse.
    let mut open: Vec<usize> = Vec::new();
    let mut next = 0;
    for t in 0..=len {
        let mut closing: Vec<usize> = open.iter().copied().filter(|&k| spans[k].1 == t).collect();
        closing.reverse();
        for k in closing {
            let e = spans[k].2;
            let tok = vocab::end_marker(doc.entities[e].entity_id);
            ids.push(marker_id(&tok, e)?);
            tokens.push(tok);
        }
        open.retain(|&k| spans[k].1 != t);
        while next < spans.len() && spans[next].0 == t {
            let (_, _, e, j) = spans[next];
            let tok = vocab::start_marker(doc.entities[e].entity_id);
            ids.push(marker_id(&tok, e)?);
            marker_index[e][j] = tokens.len();
            tokens.push(tok);
            open.push(next);
            next += 1;
        }
        if t < len {
            original_positions.push(tokens.len());
            ids.push(vocab.id_or_unk(&doc.tokens[t]));
            tokens.push(doc.tokens[t].clone());
        }
    }
    Ok(MarkedDocument {
        tokens,
        ids,
        marker_index,
        original_positions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            max_len: 512,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

/// Post-LN transformer encoder with learned token embeddings and fixed
/// sinusoidal position encodings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok: String,
    emb_ln: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// Encoder outputs for one document, as handles into the forward graph.
#[derive(Clone, Debug)]
pub struct EncodedDocument {
    /// `[L', h]` contextual embeddings.
    pub h: Var,
    /// `[L', L']` final-layer attention averaged over heads.
    pub token_attention: Var,
    /// `[1, h]`, row 0 of `h`.
    pub h_doc: Var,
    /// `[N_e, h]` pooled entity embeddings.
    pub entity_emb: Option<Var>,
    /// `[N_e, L']` per-entity token distributions.
    pub entity_attn: Option<Var>,
    pub num_entities: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, vocab_size: usize, config: EncoderConfig) -> Result<Self> {
        if config.heads == 0 || config.hidden % config.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                config.hidden, config.heads
            )));
        }
        let g = ParamGroup::Encoder;
        let h = config.hidden;
        let tok = "encoder.tok".to_string();
        store.insert(&tok, init::normal(rng, &[vocab_size, h], 0.5), g);
        let emb_ln = LayerNorm::new(store, "encoder.emb_ln", h, g);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    q: Linear::new(store, rng, &format!("{p}.wq"), h, h, g),
                    // A key offset adds the same score to every key and cancels in the softmax.
                    k: Linear::without_bias(store, rng, &format!("{p}.wk"), h, h, g),
                    v: Linear::new(store, rng, &format!("{p}.wv"), h, h, g),
                    o: Linear::new(store, rng, &format!("{p}.wo"), h, h, g),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), h, g),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), (h, config.ffn, h), g),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), h, g),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            tok,
            emb_ln,
            layers,
        })
    }

    /// Runs the transformer and pools entity embeddings and attentions.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, marked: &MarkedDocument) -> Result<EncodedDocument> {
        let (h, attn) = self.forward_tokens(g, store, &marked.ids)?;
        let h_doc = g.slice(h, 0, 0, 1)?;
        let n = marked.marker_index.len();
        let (mut embs, mut attns) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for e in 0..n {
            let mentions = (0..marked.marker_index[e].len())
                .map(|j| mention_embedding(g, h, marked, e, j))
                .collect::<Result<Vec<_>>>()?;
            let pooled = entity_pool(g, &mentions)?;
            embs.push(g.reshape(pooled, &[1, self.config.hidden])?);
            let a = entity_attention(g, attn, marked, e)?;
            let len = g.shape(a)[0];
            attns.push(g.reshape(a, &[1, len])?);
        }
        let (entity_emb, entity_attn) = if n == 0 {
            (None, None)
        } else {
            (Some(g.concat(&embs, 0)?), Some(g.concat(&attns, 0)?))
        };
        Ok(EncodedDocument {
            h,
            token_attention: attn,
            h_doc,
            entity_emb,
            entity_attn,
            num_entities: n,
        })
    }

    /// Contextual embeddings `[L', h]` and head-averaged final-layer
    /// attention `[L', L']`.
    pub fn forward_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<(Var, Var)> {
        let len = ids.len();
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        let tok = g.param(store, &self.tok)?;
        let te = g.gather(tok, ids)?;
        let pe = g.constant(sinusoid(len, self.config.hidden));
        let x = g.add(te, pe)?;
        let mut x = self.emb_ln.forward(g, store, x)?;

        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut last_attn = None;
        for layer in &self.layers {
            let q = layer.q.forward(g, store, x)?;
            let k = layer.k.forward(g, store, x)?;
            let v = layer.v.forward(g, store, x)?;
            let mut outs = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice(q, 1, a, b)?;
                let kh = g.slice(k, 1, a, b)?;
                let vh = g.slice(v, 1, a, b)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale)?;
                let p = g.softmax(s, 1)?;
                outs.push(g.matmul(p, vh)?);
                probs.push(p);
            }
            let cat = g.concat(&outs, 1)?;
            let att = layer.o.forward(g, store, cat)?;
            let r = g.add(x, att)?;
            let y = layer.ln1.forward(g, store, r)?;
            let f = layer.ffn.forward(g, store, y)?;
            let r = g.add(y, f)?;
            x = layer.ln2.forward(g, store, r)?;

            let mut acc = probs[0];
            for &p in &probs[1..] {
                acc = g.add(acc, p)?;
            }
            last_attn = Some(g.scale(acc, 1.0 / heads as f64)?);
        }
        let attn = match last_attn {
            Some(a) => a,
            // Without attention layers every token attends uniformly.
            None => g.constant(Tensor::full(&[len, len], 1.0 / len as f64)),
        };
        Ok((x, attn))
    }
}

/// `[len, h]` table with `sin`/`cos` of `p / 10000^(2i/h)` in columns
/// `2i`/`2i + 1`.
fn sinusoid(len: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; len * h];
    for p in 0..len {
        for i in 0..h / 2 {
            let w = (p as f64) / 10000f64.powf(2.0 * i as f64 / h as f64);
            data[p * h + 2 * i] = w.sin();
            data[p * h + 2 * i + 1] = w.cos();
        }
    }
    Tensor::matrix(len, h, data).expect("len × h")
}

/// Row of `h` at the start marker of mention `mention` of entity `entity`.
pub fn mention_embedding(g: &mut Graph, h: Var, marked: &MarkedDocument, entity: usize, mention: usize) -> Result<Var> {
    let pos = marked
        .marker_index
        .get(entity)
        .and_then(|m| m.get(mention))
        .ok_or_else(|| Error::Invalid(format!("no mention {mention} for entity {entity}")))?;
    let row = g.slice(h, 0, *pos, pos + 1)?;
    let w = g.shape(row)[1];
    Ok(g.reshape(row, &[w])?)
}

/// Elementwise log Σ exp over mention embeddings.
pub fn entity_pool(g: &mut Graph, mentions: &[Var]) -> Result<Var> {
    if mentions.is_empty() {
        return Err(Error::Invalid("entity_pool needs at least one mention".into()));
    }
    let w = g.shape(mentions[0])[0];
    let rows = mentions
        .iter()
        .map(|&m| g.reshape(m, &[1, w]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stacked = g.concat(&rows, 0)?;
    Ok(g.logsumexp(stacked, 0)?)
}

/// Mean of the entity's start-marker attention rows, renormalized.
pub fn entity_attention(g: &mut Graph, token_attention: Var, marked: &MarkedDocument, entity: usize) -> Result<Var> {
    let rows = marked
        .marker_index
        .get(entity)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Invalid(format!("entity {entity} has no mentions")))?;
    let picked = g.gather(token_attention, rows)?;
    let mean = g.mean(picked, 0)?;
    let total = g.sum_all(mean)?;
    Ok(g.div(mean, total)?)
}
