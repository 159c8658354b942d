use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use super::config::RunConfig;
use super::score::{score, EvalReport, Triple};
use crate::data::docred::{mark_seen_in_train, parse_docred, TrainFacts, MAX_ENTITIES};
use crate::data::split_and_batch;
use crate::document::{Document, RelationSet};
use crate::encoding::{insert_markers, MarkedDocument};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::optim::AdamW;
use crate::tensor::{init, Graph, ParamStore, TensorError};
use crate::vocab::Vocab;

/// Worker threads for per-document work, from `DENSECC_THREADS` or the
/// machine's parallelism.
pub fn thread_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DENSECC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(avail.max(1)),
        _ => avail,
    }
}

/// Applies `f` to every item on up to `threads` workers, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Training and dev splits with the vocabulary and relation inventory built
/// from them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub relations: RelationSet,
    pub vocab: Vocab,
    pub train_facts: TrainFacts,
}

impl Corpus {
    pub fn new(train: Vec<Document>, mut dev: Vec<Document>, relations: RelationSet, min_count: usize) -> Self {
        let mut vocab = Vocab::build(&train, min_count);
        vocab.ensure_markers(MAX_ENTITIES);
        let train_facts = TrainFacts::new(&train);
        mark_seen_in_train(&mut dev, &train_facts);
        Corpus {
            train,
            dev,
            relations,
            vocab,
            train_facts,
        }
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let train_path = cfg
            .train_path
            .as_ref()
            .ok_or_else(|| Error::Config("train_path is not set".into()))?;
        let dev_path = cfg
            .dev_path
            .as_ref()
            .ok_or_else(|| Error::Config("dev_path is not set".into()))?;
        let mut relations = RelationSet::default();
        let train = parse_docred(train_path, &mut relations)?;
        let dev = parse_docred(dev_path, &mut relations)?;
        Ok(Corpus::new(train, dev, relations, cfg.min_count))
    }
}

/// A model with its parameters and the vocabulary/relations it was built for.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub relations: RelationSet,
    pub model: Model,
    pub store: ParamStore,
}

impl Session {
    pub fn new(config: RunConfig, vocab: Vocab, relations: RelationSet) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = init::rng(config.seed);
        let model = Model::new(
            &mut store,
            &mut rng,
            config.model_config(vocab.len(), relations.len()),
        )?;
        Ok(Session {
            config,
            vocab,
            relations,
            model,
            store,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.meta.insert("config".into(), self.config.to_text());
        ck.meta.insert("vocab".into(), self.vocab.to_text());
        ck.meta.insert("relations".into(), self.relations.names().join("\n"));
        ck
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads its
    /// parameters.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{k}`")))
        };
        let config = RunConfig::parse(meta("config")?)?;
        let vocab = Vocab::from_text(meta("vocab")?)?;
        let names = meta("relations")?;
        let relations = RelationSet::new(names.lines().map(str::to_string).collect());
        let mut session = Session::new(config, vocab, relations)?;
        ck.restore_into(&mut session.store)?;
        Ok(session)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Session::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn mark(&self, docs: &[Document]) -> Result<Vec<MarkedDocument>> {
        docs.iter().map(|d| insert_markers(d, &self.vocab)).collect()
    }

    pub fn predict(&self, marked: &MarkedDocument) -> Result<Vec<Triple>> {
        let mut g = Graph::new();
        Ok(match self.model.forward(&mut g, &self.store, marked)? {
            Some(fwd) => self.model.predict(&g, &fwd),
            None => Vec::new(),
        })
    }

    pub fn predict_all(&self, marked: &[MarkedDocument]) -> Result<Vec<Vec<Triple>>> {
        par_map(marked, thread_count(), |m| self.predict(m)).into_iter().collect()
    }

    pub fn evaluate(&self, docs: &[Document], train: Option<&TrainFacts>) -> Result<EvalReport> {
        let marked = self.mark(docs)?;
        let preds = self.predict_all(&marked)?;
        Ok(score(docs, &preds, train))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_adap: f64,
    pub loss_bias: f64,
    pub loss_cluster: f64,
    pub loss_total: f64,
    pub dev_f1: f64,
    pub dev_ign_f1: f64,
    pub dev_depth_f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best: EvalReport,
    pub best_checkpoint: PathBuf,
    pub session: Session,
}

#[derive(Default)]
struct DocLoss {
    adap: f64,
    bias: f64,
    cluster: f64,
    total: f64,
}

fn nonfinite(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteLoss { .. })
}

/// One document's forward and backward pass, with the loss scaled by
/// `weight`. Returns the graph holding the gradients.
fn doc_step(session: &Session, doc: &Document, marked: &MarkedDocument, weight: f64) -> Result<Option<(Graph, DocLoss)>> {
    let cfg = &session.config;
    let mut g = Graph::new();
    let Some(fwd) = session.model.forward(&mut g, &session.store, marked)? else {
        return Ok(None);
    };
    let labels = doc.pair_labels();
    let terms = session
        .model
        .loss(&mut g, &fwd, &labels, &cfg.clustering(), cfg.switches())?;
    let val = |v: Option<_>| v.map_or(0.0, |v| g.value(v).item());
    let loss = DocLoss {
        adap: val(Some(terms.adap)),
        bias: val(terms.bias),
        cluster: val(terms.cluster),
        total: val(Some(terms.total)),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { doc_id: doc.doc_id.clone() });
    }
    let scaled = g.scale(terms.total, weight)?;
    g.backward(scaled)?;
    Ok(Some((g, loss)))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let keys: Vec<String> = records
        .iter()
        .flat_map(|r| r.dev_depth_f1.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = "epoch,loss_adap,loss_bias,loss_cluster,loss_total,dev_f1,dev_ign_f1".to_string();
    for k in &keys {
        header.push_str(&format!(",dev_f1_depth_{k}"));
    }
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss_adap, r.loss_bias, r.loss_cluster, r.loss_total, r.dev_f1, r.dev_ign_f1
        );
        for k in &keys {
            line.push(',');
            if let Some(v) = r.dev_depth_f1.get(k) {
                line.push_str(&v.to_string());
            }
        }
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let corpus = Corpus::load(cfg)?;
    train_on(cfg, &corpus)
}

/// Trains on `corpus.train`, evaluating on `corpus.dev` after every epoch.
///
/// Writes into `cfg.out_dir`: `config.txt`, `metrics.jsonl` (one record per
/// epoch), `metrics.csv`, `timing.jsonl`, `last.ckpt` and `best.ckpt`.
pub fn train_on(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    for p in [&metrics_path, &timing_path] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let best_path = out.join("best.ckpt");

    let mut session = Session::new(cfg.clone(), corpus.vocab.clone(), corpus.relations.clone())?;
    let marked = session.mark(&corpus.train)?;
    let batches_per_epoch = corpus.train.len().div_ceil(cfg.batch_size.max(1));
    let mut opt = AdamW::new(cfg.optimizer((batches_per_epoch * cfg.epochs) as u64));
    let threads = thread_count();
    let start = Instant::now();

    // Parameters before the most recent optimizer step.
    let mut last_good = session.store.clone();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport)> = None;
    for epoch in 1..=cfg.epochs {
        let mut sums = DocLoss::default();
        let mut counted = 0usize;
        for batch in split_and_batch(corpus.train.len(), cfg.batch_size, cfg.seed, epoch) {
            let weight = 1.0 / batch.len() as f64;
            session.store.zero_grad();
            let results = par_map(&batch, threads, |&i| doc_step(&session, &corpus.train[i], &marked[i], weight));
            for (&i, r) in batch.iter().zip(results) {
                match r {
                    Ok(Some((g, loss))) => {
                        session.store.absorb_grads(&g);
                        sums.adap += loss.adap;
                        sums.bias += loss.bias;
                        sums.cluster += loss.cluster;
                        sums.total += loss.total;
                        counted += 1;
                    }
                    Ok(None) => {}
                    Err(e) if nonfinite(&e) => {
                        let doc_id = &corpus.train[i].doc_id;
                        let dump = format!("epoch {epoch}\ndocument {doc_id}\nerror {e}\n");
                        fs::write(out.join("nonfinite.txt"), dump).map_err(|e| Error::io(out, e))?;
                        session.store = last_good;
                        session.save(out.join("last_good.ckpt"))?;
                        warn!("non-finite loss on document {doc_id}; parameters saved to last_good.ckpt");
                        return Err(Error::NonFiniteLoss { doc_id: doc_id.clone() });
                    }
                    Err(e) => return Err(e),
                }
            }
            session.store.clip_grad_norm(cfg.max_grad_norm);
            last_good.clone_from(&session.store);
            opt.step(&mut session.store);
        }
        let c = counted.max(1) as f64;
        let report = session.evaluate(&corpus.dev, Some(&corpus.train_facts))?;
        let rec = MetricsRecord {
            epoch,
            loss_adap: sums.adap / c,
            loss_bias: sums.bias / c,
            loss_cluster: sums.cluster / c,
            loss_total: sums.total / c,
            dev_f1: report.f1(),
            dev_ign_f1: report.ign_f1(),
            dev_depth_f1: report.depth.iter().map(|(k, v)| (k.clone(), v.f1())).collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
        append_line(&metrics_path, &line)?;
        append_line(
            &timing_path,
            &format!("{{\"epoch\":{epoch},\"wall_secs\":{:.3}}}", start.elapsed().as_secs_f64()),
        )?;
        info!(
            "epoch {epoch}: loss {:.4} dev F1 {:.4} IgnF1 {:.4}",
            rec.loss_total, rec.dev_f1, rec.dev_ign_f1
        );
        records.push(rec);
        session.save(out.join("last.ckpt"))?;
        if best.as_ref().map_or(true, |(_, b)| report.f1() > b.f1()) {
            session.save(&best_path)?;
            best = Some((epoch, report));
        }
    }
    write_csv(&out.join("metrics.csv"), &records)?;
    let (best_epoch, best) = best.unwrap_or_default();
    Ok(TrainOutcome {
        records,
        best_epoch,
        best,
        best_checkpoint: best_path,
        session,
    })
}
