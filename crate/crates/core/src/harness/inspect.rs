use std::fmt::Write as _;

use super::train::Session;
use crate::ccnet::{AttentionTrace, PairAttention};
use crate::document::Document;
use crate::encoding::insert_markers;
use crate::error::{Error, Result};
use crate::tensor::Graph;

/// Per-layer attention of one pair `(s, o)`.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub doc_id: String,
    pub n: usize,
    pub s: usize,
    pub o: usize,
    pub layers: Vec<PairAttention>,
}

impl Inspection {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.layers {
            out.push_str(&serde_json::to_string(rec).expect("attention records serialize"));
            out.push('\n');
        }
        out
    }

    /// Positions sorted by weight, one block per layer.
    pub fn to_table(&self) -> String {
        let mut s = format!("document {}  pair ({}, {})  entities {}\n", self.doc_id, self.s, self.o, self.n);
        for rec in &self.layers {
            let _ = writeln!(s, "layer {}", rec.layer);
            let mut order: Vec<usize> = (0..rec.positions.len()).collect();
            order.sort_by(|&a, &b| rec.weights[b].total_cmp(&rec.weights[a]).then(a.cmp(&b)));
            for i in order {
                let (ps, po) = rec.positions[i];
                let _ = writeln!(s, "  ({ps:>2}, {po:>2})  {:.6}", rec.weights[i]);
            }
        }
        s
    }

    /// The `k` most attended positions in `layer`.
    pub fn top(&self, layer: usize, k: usize) -> Vec<(usize, usize)> {
        let Some(rec) = self.layers.iter().find(|r| r.layer == layer) else {
            return Vec::new();
        };
        let mut order: Vec<usize> = (0..rec.positions.len()).collect();
        order.sort_by(|&a, &b| rec.weights[b].total_cmp(&rec.weights[a]).then(a.cmp(&b)));
        order.into_iter().take(k).map(|i| rec.positions[i]).collect()
    }
}

/// Runs the model on `doc` and extracts the attention every layer paid from
/// pair `(s, o)`.
pub fn inspect(session: &Session, doc: &Document, s: usize, o: usize) -> Result<Inspection> {
    let n = doc.entities.len();
    if s >= n || o >= n {
        return Err(Error::Invalid(format!(
            "pair ({s}, {o}) out of range for document {} with {n} entities",
            doc.doc_id
        )));
    }
    let marked = insert_markers(doc, &session.vocab)?;
    let mut g = Graph::new();
    let (_, dense) = session.model.forward_block(&mut g, &session.store, &marked)?;
    let trace = AttentionTrace::from_output(&g, &dense);
    let layers = (0..dense.layers.len())
        .filter_map(|l| trace.get(l, s, o).cloned())
        .collect();
    Ok(Inspection {
        doc_id: doc.doc_id.clone(),
        n,
        s,
        o,
        layers,
    })
}
