//! Finite-difference check of every differentiable component on a random
//! three-entity document.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::train::{Corpus, Session};
use crate::ccnet::{clustering_stats, dense_forward};
use crate::document::{Document, Entity, Fact, Mention, RelationSet};
use crate::encoding::insert_markers;
use crate::error::{Error, Result};
use crate::heads::{atl_loss, bias_loss, classify, clustering_loss};
use crate::pair_matrix::{build_matrix, EntityPairMatrix};
use crate::tensor::gradcheck::{grad_check, grad_check_params};
use crate::tensor::init::Rng64;
use crate::tensor::{init, Fault, Graph, ParamStore, TensorError, Var};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub worst: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_relative_error < TOLERANCE)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        for c in &self.components {
            let verdict = if c.max_relative_error < TOLERANCE { "ok" } else { "FAIL" };
            writeln!(
                f,
                "  {:<16} {:>10.3e}  {:>6} coords  {verdict}",
                c.component, c.max_relative_error, c.coordinates
            )?;
        }
        Ok(())
    }
}

/// Tiny model dimensions so every coordinate can be probed.
pub fn gradcheck_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        enc_layers: 2,
        enc_heads: 2,
        hidden: 8,
        ffn: 12,
        max_len: 64,
        dim: 6,
        attn_dim: 4,
        bias_hidden: 5,
        z_dim: 4,
        groups: 2,
        layers: 3,
        ..RunConfig::default()
    }
}

/// A random document with three entities, two relation types, and at least
/// one related and one unrelated ordered pair.
pub fn random_document(seed: u64) -> Document {
    let mut rng = init::rng(seed ^ 0x5eed);
    let words = ["the", "of", "near", "saw", "and", "."];
    let len = 16;
    let tokens: Vec<String> = (0..len).map(|_| words.choose(&mut rng).unwrap().to_string()).collect();
    let mut starts = vec![0, 3, 6, 9, 12];
    starts.shuffle(&mut rng);
    let mut entities: Vec<Entity> = (0..3)
        .map(|e| Entity {
            entity_id: e,
            entity_type: None,
            mentions: Vec::new(),
        })
        .collect();
    for (k, &s) in starts.iter().enumerate() {
        let e = if k < 3 { k } else { rng.gen_range(0..3) };
        let end = s + rng.gen_range(1..=2);
        entities[e].mentions.push(Mention {
            start: s,
            end,
            name: tokens[s..end].join(" "),
            sent_id: None,
        });
    }
    let fact = |head, tail, relation| Fact {
        head,
        tail,
        relation,
        depth: None,
        seen_in_train: false,
    };
    let mut facts = vec![fact(0, 1, 0), fact(1, 2, rng.gen_range(0..2))];
    if rng.gen_bool(0.5) {
        facts.push(fact(0, 1, 1));
    }
    Document {
        doc_id: format!("gradcheck-{seed}"),
        tokens,
        sentence_starts: vec![0],
        entities,
        facts,
    }
}

fn component(name: &str, max_relative_error: f64, coordinates: usize, worst: Option<String>) -> ComponentCheck {
    ComponentCheck {
        component: name.to_string(),
        max_relative_error,
        coordinates,
        worst,
    }
}

/// `Σ r ⊙ x` for a fixed random `r` shaped like `x`.
fn readout(g: &mut Graph, x: Var, rng: &mut Rng64) -> std::result::Result<Var, TensorError> {
    let r = init::normal(rng, g.shape(x), 1.0);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    g.sum_all(p)
}

fn check_params<F>(label: &str, store: &ParamStore, prefix: &str, fault: Option<Fault>, f: F) -> Result<ComponentCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    let report = grad_check_params(store, &names, |g, st| {
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        f(g, st).map_err(tensor_err)
    })?;
    Ok(component(
        label,
        report.max_relative_error,
        report.coordinates,
        report.worst.map(|(n, i)| format!("{n}[{i}]")),
    ))
}

/// Checks each module's parameters through a composite of that module (a
/// fixed random readout of its outputs, plus its own training signal where
/// it has one), then the three loss functions against their inputs.
pub fn gradcheck(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let doc = random_document(seed);
    let corpus = Corpus::new(vec![doc.clone()], Vec::new(), RelationSet::new(vec!["r0".into(), "r1".into()]), 1);
    let session = Session::new(gradcheck_config(seed), corpus.vocab.clone(), corpus.relations.clone())?;
    let marked = insert_markers(&doc, &session.vocab)?;
    let labels = doc.pair_labels();
    let model = &session.model;
    let cfg = &session.config;
    let n = doc.entities.len();
    let mut components = Vec::new();

    components.push(check_params("encoder", &session.store, "encoder.", fault, |g, st| {
        let mut rng = init::rng(seed ^ 1);
        let enc = model.encoder.encode(g, st, &marked)?;
        let mut total = readout(g, enc.h, &mut rng)?;
        for v in [enc.entity_emb, enc.entity_attn].into_iter().flatten() {
            let t = readout(g, v, &mut rng)?;
            total = g.add(total, t)?;
        }
        Ok(total)
    })?);

    components.push(check_params("pair_matrix", &session.store, "pair.", fault, |g, st| {
        let mut rng = init::rng(seed ^ 2);
        let enc = model.encoder.encode(g, st, &marked)?;
        let m = build_matrix(g, st, &model.pair, &enc)?;
        Ok(readout(g, m.m, &mut rng)?)
    })?);

    let m_in = init::normal(&mut init::rng(seed ^ 3), &[n * n, cfg.dim], 1.0);
    components.push(check_params("ccnet", &session.store, "ccnet.", fault, |g, st| {
        let mut rng = init::rng(seed ^ 4);
        let m = g.constant(m_in.clone());
        let out = dense_forward(g, st, &model.block, EntityPairMatrix { n, d: cfg.dim, m })?;
        let mut probs = Vec::new();
        for l in &out.layers {
            if let Some(b) = l.bias_logits {
                probs.push(g.sigmoid(b)?);
            }
        }
        let r = readout(g, out.m.m, &mut rng)?;
        let b = bias_loss(g, &probs, &labels)?;
        Ok(g.add(r, b)?)
    })?);

    let k = n * (n - 1);
    let mut rng = init::rng(seed ^ 5);
    let hs = init::normal(&mut rng, &[k, cfg.hidden], 1.0);
    let ho = init::normal(&mut rng, &[k, cfg.hidden], 1.0);
    let mf = init::normal(&mut rng, &[k, cfg.dim], 1.0);
    components.push(check_params("classifier", &session.store, "cls.", fault, |g, st| {
        let mut rng = init::rng(seed ^ 6);
        let (a, b, c) = (g.constant(hs.clone()), g.constant(ho.clone()), g.constant(mf.clone()));
        let logits = classify(g, st, &model.classifier, a, b, c)?;
        Ok(readout(g, logits, &mut rng)?)
    })?);

    let mut rng = init::rng(seed);
    let logits = init::normal(&mut rng, &[k, 3], 1.0);
    let gold: Vec<Vec<usize>> = labels
        .off_diagonal()
        .into_iter()
        .map(|p| labels.relations[p].clone())
        .collect();
    let gold_refs: Vec<&[usize]> = gold.iter().map(Vec::as_slice).collect();
    let err = grad_check(
        |g, x| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            atl_loss(g, x, &gold_refs).map_err(tensor_err)
        },
        &logits,
    )?;
    components.push(component("atl_loss", err, logits.numel(), None));

    let m = init::normal(&mut rng, &[n * n, 5], 1.0);
    let ccfg = cfg.clustering();
    let err = grad_check(
        |g, x| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let stats = clustering_stats(g, x, &labels).map_err(tensor_err)?.expect("mixed labels");
            Ok(clustering_loss(g, &stats, x, &ccfg).map_err(tensor_err)?.total)
        },
        &m,
    )?;
    components.push(component("clustering_loss", err, m.numel(), None));

    let raw = init::normal(&mut rng, &[2 * n * n, 1], 1.0);
    let err = grad_check(
        |g, x| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let a = g.slice(x, 0, 0, n * n)?;
            let b = g.slice(x, 0, n * n, 2 * n * n)?;
            let pa = g.sigmoid(a)?;
            let pb = g.sigmoid(b)?;
            bias_loss(g, &[pa, pb], &labels).map_err(tensor_err)
        },
        &raw,
    )?;
    components.push(component("bias_loss", err, raw.numel(), None));

    Ok(GradcheckReport { seed, components })
}

/// The checkers speak tensor errors; anything else the model raises is
/// reported through the closest variant.
fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::UnknownParam(other.to_string()),
    }
}
