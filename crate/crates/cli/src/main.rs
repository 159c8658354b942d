use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use densecc::data::docred::{mark_seen_in_train, parse_docred, write_docred, TrainFacts};
use densecc::data::synth::{synth_generate, SynthSpec};
use densecc::document::RelationSet;
use densecc::harness::ablate::{ablate, format_table, Axis};
use densecc::harness::gradcheck::gradcheck;
use densecc::harness::inspect::inspect;
use densecc::harness::{train, Corpus, RunConfig, Session};
use densecc::tensor::Fault;

#[derive(Parser)]
#[command(name = "densecc", version, about = "Document-level relation extraction with a dense criss-cross pair reasoner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a DocRED-format file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training split, for IgnF1.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Train one run per variant of an ablation axis and print a table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// dense, expand, cluster, bias, layers or layers:<n>,<n>,...
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of every component.
    Gradcheck {
        #[arg(long = "seed", default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Corrupt the tanh backward pass, to confirm the check fails.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate a synthetic composition corpus in DocRED format.
    SynthGen {
        /// JSON spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the attention one pair paid in every criss-cross layer.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        doc: String,
        /// `s,o`
        #[arg(long)]
        pair: String,
        /// Write the JSONL trace here instead of stdout.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, seed, out, &overrides)?;
            let outcome = train(&cfg)?;
            println!(
                "best epoch {}: dev F1 {:.4}  IgnF1 {:.4}",
                outcome.best_epoch,
                outcome.best.f1(),
                outcome.best.ign_f1()
            );
            println!("checkpoint {}", outcome.best_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            train_data,
        } => {
            let session = Session::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut relations = session.relations.clone();
            let mut docs = parse_docred(&data, &mut relations)?;
            let train_facts = match &train_data {
                Some(p) => {
                    let mut scratch = relations.clone();
                    let t = TrainFacts::new(&parse_docred(p, &mut scratch)?);
                    mark_seen_in_train(&mut docs, &t);
                    Some(t)
                }
                None => None,
            };
            let report = session.evaluate(&docs, train_facts.as_ref())?;
            let a = report.all;
            println!("documents {}", docs.len());
            println!("P {:.4}  R {:.4}  F1 {:.4}", a.precision(), a.recall(), a.f1());
            if train_facts.is_some() {
                println!("IgnF1 {:.4}", report.ign_f1());
            }
            for (k, c) in &report.depth {
                println!("depth {k:<9} F1 {:.4}  (tp {} pred {} gold {})", c.f1(), c.tp, c.pred, c.gold);
            }
        }
        Command::Ablate {
            config,
            axis,
            out,
            overrides,
        } => {
            let axis: Axis = axis.parse()?;
            let cfg = load_config(&config, None, out, &overrides)?;
            let corpus = Corpus::load(&cfg)?;
            let rows = ablate(&cfg, &axis, &corpus)?;
            let table = format_table(&rows);
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck { seeds, inject_fault } => {
            let fault = inject_fault.then_some(Fault::TanhBackward);
            let mut ok = true;
            for seed in seeds {
                let report = gradcheck(seed, fault)?;
                print!("{report}");
                ok &= report.passed();
            }
            println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::SynthGen { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            let (docs, relations) = synth_generate(&spec)?;
            write_docred(&out, &docs, &relations)?;
            info!("wrote {} documents to {}", docs.len(), out.display());
        }
        Command::Inspect {
            checkpoint,
            data,
            doc,
            pair,
            jsonl,
        } => {
            let Some((s, o)) = pair.split_once(',') else {
                bail!("--pair expects `s,o`, got `{pair}`");
            };
            let (s, o): (usize, usize) = (s.trim().parse()?, o.trim().parse()?);
            let session = Session::load(&checkpoint)?;
            let mut relations: RelationSet = session.relations.clone();
            let docs = parse_docred(&data, &mut relations)?;
            let Some(d) = docs.iter().find(|d| d.doc_id == doc) else {
                bail!("no document titled `{doc}` in {}", data.display());
            };
            let ins = inspect(&session, d, s, o)?;
            match jsonl {
                Some(p) => fs::write(&p, ins.to_jsonl())?,
                None => print!("{}", ins.to_jsonl()),
            }
            print!("{}", ins.to_table());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
