//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{block, config, influence, masked_full_attention, random_matrix, run_block, run_layer};
use densecc::ccnet::ClusterStats;
use densecc::data::docred::parse_docred;
use densecc::data::synth::{synth_generate, SynthSpec};
use densecc::document::{Document, PairLabels, RelationSet};
use densecc::harness::gradcheck::{gradcheck, TOLERANCE};
use densecc::harness::inspect::inspect;
use densecc::harness::{train_on, Corpus, RunConfig, Session, TrainOutcome};
use densecc::heads::{atl_loss, bias_loss, clustering_loss, ClusteringConfig};
use densecc::tensor::{init, Graph, Tensor};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scratch_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("densecc-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("scratch directory");
    dir
}

fn criterion_gradcheck() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for seed in 1..=3 {
        let report = match gradcheck(seed, None) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        worst = worst.max(report.max_relative_error());
        for c in report.components.iter().filter(|c| c.max_relative_error >= TOLERANCE) {
            let _ = write!(detail, " seed {seed} {} {:.2e};", c.component, c.max_relative_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < TOLERANCE && secs < 60.0;
    verdict(pass, format!("max relative error {worst:.2e} over 3 seeds in {secs:.1}s{detail}"))
}

fn criterion_cca_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = init::rng(100);
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        for expanded in [false, true] {
            let (b, store) = block(1000 + n as u64, config(1, expanded, true));
            let m = random_matrix(&mut rng, n);
            let diff = run_layer(&store, &b, &m, n).max_abs_diff(&masked_full_attention(&store, &b, &m, n));
            worst = worst.max(diff);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-9 && secs < 10.0,
        format!("max abs diff {worst:.2e} for N_e = 2..6, both modes, {secs:.2}s"),
    )
}

fn criterion_receptive_field() -> Verdict {
    let n = 4;
    let mut rng = init::rng(7);
    let mut violations = [0usize; 3];
    for draw in 0..20u64 {
        let cases: [(usize, bool, &dyn Fn(usize, usize, usize, usize) -> bool); 3] = [
            (1, false, &|a, c, s, o| a == s || c == o),
            (1, true, &|a, c, s, o| a == s || c == o || c == s || a == o),
            (2, false, &|_, _, _, _| true),
        ];
        for (k, (layers, expanded, field)) in cases.iter().enumerate() {
            let (b, store) = block(300 + draw, config(*layers, *expanded, true));
            let m = random_matrix(&mut rng, n);
            for a in 0..n {
                for c in 0..n {
                    let delta = rng.gen_range(0.5..1.5);
                    let resp = if *layers == 1 {
                        influence(|x| run_layer(&store, &b, x, n), &m, n, a, c, delta)
                    } else {
                        influence(|x| run_block(&store, &b, x, n), &m, n, a, c, delta)
                    };
                    for (p, &r) in resp.iter().enumerate() {
                        let (s, o) = (p / n, p % n);
                        if (r > 1e-12) != field(a, c, s, o) || (r > 0.0) != field(a, c, s, o) {
                            violations[k] += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        violations == [0, 0, 0],
        format!(
            "violations: standard {}, expanded {}, two standard layers {} (N_e = 4, 20 draws)",
            violations[0], violations[1], violations[2]
        ),
    )
}

fn criterion_loss_values() -> Verdict {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 2]));
    let atl = atl_loss(&mut g, logits, &[&[0]]).map(|v| g.value(v).item());
    let atl_ok = atl.as_ref().is_ok_and(|v| (v - 2f64.ln()).abs() <= 1e-12);

    let cfg = ClusteringConfig::default();
    let cfg_ok = cfg.mu == 1.0 && cfg.lambda == 0.5;
    let row = |g: &mut Graph, v: &[f64]| g.constant(Tensor::matrix(1, 2, v.to_vec()).unwrap());
    let v1 = row(&mut g, &[1.0, 0.0]);
    let v0 = row(&mut g, &[-2.0, 0.0]);
    // Related rows at cosine 1 and 0.6 from their centre, unrelated rows on theirs.
    let feats = |lo: f64| Tensor::matrix(4, 2, vec![1.0, 0.0, lo, (1.0 - lo * lo).sqrt(), -1.0, 0.0, -3.0, 0.0]).unwrap();
    let terms = |g: &mut Graph, lo: f64| {
        let m = g.constant(feats(lo));
        let st = ClusterStats {
            v0,
            v1,
            pos: vec![0, 1],
            neg: vec![2, 3],
        };
        let t = clustering_loss(g, &st, m, &cfg).unwrap();
        (g.value(t.dist).item(), g.value(t.var1).item(), g.value(t.var0).item())
    };
    let zero = terms(&mut g, 0.6);
    let at_margin = terms(&mut g, 0.5);
    let inside = terms(&mut g, 0.4);
    let hinge_ok = zero == (0.0, 0.0, 0.0) && at_margin == (0.0, 0.0, 0.0) && (inside.1 - 0.01).abs() < 1e-12;

    let labels = PairLabels {
        n: 3,
        relations: (0..9).map(|p| if p == 1 { vec![0] } else { Vec::new() }).collect(),
    };
    let half = g.constant(Tensor::full(&[9, 1], 0.5));
    let bce = bias_loss(&mut g, &[half], &labels).map(|v| g.value(v).item());
    let bce_ok = bce.as_ref().is_ok_and(|v| (v - 2f64.ln()).abs() <= 1e-12);
    verdict(
        atl_ok && cfg_ok && hinge_ok && bce_ok,
        format!(
            "ATL {:?}, clustering hinge terms {zero:?} / {at_margin:?} / {inside:?} with mu=1 lambda=0.5, BCE {:?}",
            atl.ok(),
            bce.ok()
        ),
    )
}

fn synthetic_corpus() -> Corpus {
    let (train, rels) = synth_generate(&SynthSpec::default()).expect("train split");
    let (dev, _) = synth_generate(&SynthSpec {
        n_docs: 100,
        seed: 18,
        title_prefix: "dev".into(),
        ..SynthSpec::default()
    })
    .expect("dev split");
    Corpus::new(train, dev, rels, RunConfig::synthetic().min_count)
}

/// Trained runs keyed by variant name and seed, so the full model trained for
/// the depth comparison is reused by the ablation check.
struct Runs<'a> {
    corpus: &'a Corpus,
    root: PathBuf,
    done: BTreeMap<(String, u64), TrainOutcome>,
}

impl Runs<'_> {
    fn get(&mut self, name: &str, seed: u64, edit: impl Fn(&mut RunConfig)) -> Option<&TrainOutcome> {
        let key = (name.to_string(), seed);
        if !self.done.contains_key(&key) {
            let mut cfg = RunConfig::synthetic();
            cfg.seed = seed;
            edit(&mut cfg);
            cfg.out_dir = self.root.join(format!("{}-seed{seed}", name.replace(['/', ' ', '='], "_")));
            let start = Instant::now();
            match train_on(&cfg, self.corpus) {
                Ok(out) => {
                    println!(
                        "  trained {name} seed {seed}: best epoch {} dev F1 {:.4} composed {:.4} ({:.0}s)",
                        out.best_epoch,
                        out.best.f1(),
                        out.best.depth_f1("composed").unwrap_or(0.0),
                        start.elapsed().as_secs_f64()
                    );
                    self.done.insert(key.clone(), out);
                }
                Err(e) => {
                    println!("  training {name} seed {seed} failed: {e}");
                    return None;
                }
            }
        }
        self.done.get(&key)
    }
}

fn criterion_multi_hop(runs: &mut Runs) -> Verdict {
    let start = Instant::now();
    let scores = |o: &TrainOutcome| {
        (
            o.best.depth_f1("composed").unwrap_or(0.0),
            o.best.depth_f1("2").unwrap_or(0.0),
        )
    };
    let Some(three) = runs.get("full", 1, |_| {}).map(scores) else {
        return verdict(false, "3-layer run failed");
    };
    let Some(zero) = runs.get("layers=0", 1, |c| c.layers = 0).map(scores) else {
        return verdict(false, "0-layer run failed");
    };
    let Some(two) = runs.get("layers=2", 1, |c| c.layers = 2).map(scores) else {
        return verdict(false, "2-layer run failed");
    };
    let margin = 100.0 * (three.0 - zero.0);
    let pass = margin >= 10.0 && three.1 >= two.1;
    verdict(
        pass,
        format!(
            "composed F1: 3-layer {:.2}, 0-layer {:.2} (margin {margin:+.2}); depth-2 F1: 3-layer {:.2}, 2-layer {:.2}; {:.0}s",
            100.0 * three.0,
            100.0 * zero.0,
            100.0 * three.1,
            100.0 * two.1,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_ablations(runs: &mut Runs) -> Verdict {
    let axes: [(&str, fn(&mut RunConfig)); 4] = [
        ("w/o dense", |c| c.dense = false),
        ("w/o expand", |c| c.expanded_field = false),
        ("w/o cluster", |c| c.use_clustering = false),
        ("w/o bias", |c| c.use_bias = false),
    ];
    let seeds = [1u64, 2, 3];
    let mut mean = |name: &str, edit: fn(&mut RunConfig)| -> Option<(f64, Vec<f64>)> {
        let mut f = Vec::new();
        for &s in &seeds {
            f.push(runs.get(name, s, edit)?.best.f1());
        }
        Some((f.iter().sum::<f64>() / f.len() as f64, f))
    };
    let Some((full, full_seeds)) = mean("full", |_| {}) else {
        return verdict(false, "full-model run failed");
    };
    let mut pass = true;
    let mut detail = format!("full {:.2} {:?}", 100.0 * full, pct(&full_seeds));
    for (name, edit) in axes {
        match mean(name, edit) {
            Some((f, per)) => {
                let ok = f <= full + 0.01;
                pass &= ok;
                let _ = write!(detail, "; {name} {:.2} {:?}{}", 100.0 * f, pct(&per), if ok { "" } else { " (above full + 1)" });
            }
            None => {
                pass = false;
                let _ = write!(detail, "; {name} failed to train");
            }
        }
    }
    verdict(pass, format!("mean dev F1 over seeds 1-3: {detail}"))
}

fn pct(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect()
}

fn logits_bits(session: &Session, docs: &[Document]) -> Vec<u64> {
    let marked = session.mark(docs).expect("marking");
    let mut bits = Vec::new();
    for m in &marked {
        let mut g = Graph::new();
        if let Some(f) = session.model.forward(&mut g, &session.store, m).expect("forward") {
            bits.extend(g.value(f.logits).data().iter().map(|x| x.to_bits()));
        }
    }
    bits
}

fn criterion_determinism(runs: &mut Runs) -> Verdict {
    let corpus = runs.corpus;
    let small = Corpus::new(corpus.train[..40].to_vec(), corpus.dev[..20].to_vec(), corpus.relations.clone(), 1);
    let run = |dir: &Path| -> Option<(Vec<u8>, Vec<u8>)> {
        let cfg = RunConfig {
            epochs: 3,
            seed: 5,
            out_dir: dir.to_path_buf(),
            ..RunConfig::synthetic()
        };
        train_on(&cfg, &small).ok()?;
        let read = |f: &str| std::fs::read(dir.join(f)).ok();
        Some((read("metrics.jsonl")?, read("metrics.csv")?))
    };
    let (a, b) = (runs.root.join("det-a"), runs.root.join("det-b"));
    let logs_equal = match (run(&a), run(&b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    };

    let Some(full) = runs.get("full", 1, |_| {}) else {
        return verdict(false, "3-layer run failed");
    };
    let (eval_equal, bits_equal) = match Session::load(&full.best_checkpoint) {
        Ok(loaded) => {
            let report = loaded.evaluate(&corpus.dev, Some(&corpus.train_facts));
            let live = logits_bits(&full.session, &corpus.dev[..10]);
            // `last.ckpt` holds the parameters the returned session ended with.
            let reloaded = Session::load(full.best_checkpoint.with_file_name("last.ckpt")).ok();
            let bits = reloaded.is_some_and(|s| logits_bits(&s, &corpus.dev[..10]) == live);
            (report.is_ok_and(|r| r == full.best), bits)
        }
        Err(_) => (false, false),
    };
    verdict(
        logs_equal && eval_equal && bits_equal,
        format!(
            "metrics logs identical: {logs_equal}; best checkpoint re-evaluates identically: {eval_equal}; reloaded logits bit-exact: {bits_equal}"
        ),
    )
}

fn criterion_docred() -> Verdict {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut rels = RelationSet::default();
    let golden_ok = match (
        parse_docred(fixtures.join("docred_mini.json"), &mut rels),
        std::fs::read_to_string(fixtures.join("docred_mini.golden.json")),
    ) {
        (Ok(docs), Ok(text)) => {
            let golden: serde_json::Value = serde_json::from_str(&text).expect("golden json");
            serde_json::to_value(&docs).ok() == golden.get("documents").cloned()
                && serde_json::to_value(rels.names()).ok() == golden.get("relations").cloned()
        }
        _ => false,
    };
    let full = std::env::var_os("DENSECC_DOCRED_TRAIN").map(PathBuf::from);
    match full {
        Some(path) => {
            let mut rels = RelationSet::default();
            match parse_docred(&path, &mut rels) {
                Ok(docs) => {
                    let mean = docs.iter().map(|d| d.entities.len()).sum::<usize>() as f64 / docs.len().max(1) as f64;
                    let ok = golden_ok && docs.len() == 3053 && (mean - 19.5).abs() <= 0.5;
                    verdict(
                        ok,
                        format!("fixture matches golden: {golden_ok}; {}: {} documents, {mean:.2} entities/doc", path.display(), docs.len()),
                    )
                }
                Err(e) => verdict(false, format!("{}: {e}", path.display())),
            }
        }
        None => verdict(
            golden_ok,
            format!("fixture matches golden: {golden_ok}; fixture only (set DENSECC_DOCRED_TRAIN to check full DocRED)"),
        ),
    }
}

/// How often the two most attended positions of a depth-1 fact's pair are
/// exactly its two supporting stated pairs, per layer.
fn supporting_pair_attention(session: &Session, docs: &[Document]) -> Vec<(usize, usize)> {
    let mut per_layer = vec![(0usize, 0usize); session.config.layers];
    for d in docs {
        let stated: Vec<(usize, usize)> = d.facts.iter().filter(|f| f.depth == Some(0)).map(|f| (f.head, f.tail)).collect();
        for f in d.facts.iter().filter(|f| f.depth == Some(1)) {
            let Some(mid) = (0..d.entities.len()).find(|&m| stated.contains(&(f.head, m)) && stated.contains(&(m, f.tail))) else {
                continue;
            };
            let Ok(ins) = inspect(session, d, f.head, f.tail) else {
                continue;
            };
            for (l, slot) in per_layer.iter_mut().enumerate() {
                let mut top = ins.top(l, 2);
                top.sort_unstable();
                let mut want = vec![(f.head, mid), (mid, f.tail)];
                want.sort_unstable();
                slot.0 += usize::from(top == want);
                slot.1 += 1;
            }
        }
    }
    per_layer
}

fn main() {
    let root = scratch_dir();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let report = |n: usize, name: &'static str, v: Verdict, results: &mut Vec<(usize, &str, Verdict)>| {
        println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "gradient integrity", criterion_gradcheck(), &mut results);
    report(2, "criss-cross oracle", criterion_cca_oracle(), &mut results);
    report(3, "receptive field", criterion_receptive_field(), &mut results);
    report(4, "loss unit values", criterion_loss_values(), &mut results);

    let corpus = synthetic_corpus();
    let mut runs = Runs {
        corpus: &corpus,
        root: root.clone(),
        done: BTreeMap::new(),
    };
    report(5, "synthetic multi-hop", criterion_multi_hop(&mut runs), &mut results);
    report(6, "ablation direction", criterion_ablations(&mut runs), &mut results);
    report(7, "determinism and persistence", criterion_determinism(&mut runs), &mut results);
    report(8, "DocRED ingestion", criterion_docred(), &mut results);

    if let Some(full) = runs.get("full", 1, |_| {}) {
        if let Ok(best) = Session::load(&full.best_checkpoint) {
            let rates = supporting_pair_attention(&best, &corpus.dev);
            let text: Vec<String> = rates
                .iter()
                .enumerate()
                .map(|(l, (hit, n))| format!("layer {l}: {hit}/{n} ({:.1}%)", 100.0 * *hit as f64 / (*n).max(1) as f64))
                .collect();
            println!("INFO top-2 attention on supporting pairs of depth-1 dev facts: {}", text.join(", "));
        }
    }
    let _ = std::fs::remove_dir_all(&root);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
