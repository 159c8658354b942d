//! Micro-averaged F1, IgnF1 and depth-stratified F1.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::data::docred::TrainFacts;
use crate::document::Document;

/// `(head, tail, relation)` within one document.
pub type Triple = (usize, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Counts {
    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.pred == 0 {
            0.0
        } else {
            self.tp as f64 / self.pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.tp as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub all: Counts,
    pub ign: Counts,
    /// Keyed by depth, plus `composed` for every depth ≥ 1. Empty when the
    /// gold facts carry no depth.
    pub depth: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.all.f1()
    }

    pub fn ign_f1(&self) -> f64 {
        self.ign.f1()
    }

    pub fn depth_f1(&self, key: &str) -> Option<f64> {
        self.depth.get(key).map(Counts::f1)
    }
}

/// Undirected hop distance between entities over stated (depth 0) facts.
fn stated_distances(doc: &Document, from: usize) -> Vec<Option<usize>> {
    let n = doc.entities.len();
    let mut adj = vec![Vec::new(); n];
    for f in doc.facts.iter().filter(|f| f.depth == Some(0)) {
        adj[f.head].push(f.tail);
        adj[f.tail].push(f.head);
    }
    let mut dist = vec![None; n];
    dist[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Depth stratum of a pair: the smallest gold depth on it, otherwise one
/// less than the stated-graph distance. Pairs with no stated path get
/// `None` and count only toward `composed`.
fn pair_stratum(doc: &Document, s: usize, o: usize) -> Option<u32> {
    let gold = doc
        .facts
        .iter()
        .filter(|f| f.head == s && f.tail == o)
        .filter_map(|f| f.depth)
        .min();
    if gold.is_some() {
        return gold;
    }
    stated_distances(doc, s)[o].map(|d| d.max(1) as u32 - 1)
}

/// Scores predicted triples against each document's gold facts. With
/// `train`, IgnF1 drops facts seen in training from both sides.
pub fn score(docs: &[Document], preds: &[Vec<Triple>], train: Option<&TrainFacts>) -> EvalReport {
    let mut report = EvalReport::default();
    let has_depth = docs.iter().flat_map(|d| &d.facts).any(|f| f.depth.is_some());
    for (doc, pred) in docs.iter().zip(preds) {
        let gold: BTreeMap<Triple, Option<u32>> = doc
            .facts
            .iter()
            .map(|f| ((f.head, f.tail, f.relation), f.depth))
            .collect();
        let pred: BTreeSet<Triple> = pred.iter().copied().collect();
        let seen = |t: &Triple| train.is_some_and(|tf| tf.contains(doc, t.0, t.1, t.2));

        let mut all = Counts { gold: gold.len(), pred: pred.len(), ..Counts::default() };
        let mut ign = Counts::default();
        ign.gold = gold.keys().filter(|t| !seen(t)).count();
        for t in &pred {
            let hit = gold.contains_key(t);
            all.tp += usize::from(hit);
            if !seen(t) {
                ign.pred += 1;
                ign.tp += usize::from(hit);
            }
        }
        report.all.add(all);
        report.ign.add(ign);

        if !has_depth {
            continue;
        }
        let mut bump = |stratum: Option<u32>, c: Counts| {
            if let Some(k) = stratum {
                report.depth.entry(k.to_string()).or_default().add(c);
            }
            if stratum != Some(0) {
                report.depth.entry("composed".into()).or_default().add(c);
            }
        };
        for (t, d) in &gold {
            let hit = pred.contains(t);
            bump(*d, Counts { tp: usize::from(hit), pred: usize::from(hit), gold: 1 });
        }
        for t in pred.iter().filter(|t| !gold.contains_key(*t)) {
            bump(pair_stratum(doc, t.0, t.1), Counts { tp: 0, pred: 1, gold: 0 });
        }
    }
    report
}
