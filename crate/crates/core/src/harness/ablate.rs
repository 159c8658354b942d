use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::config::RunConfig;
use super::train::{train_on, Corpus};
use crate::error::{Error, Result};

/// What an ablation sweeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axis {
    Dense,
    Expand,
    Cluster,
    Bias,
    Layers(Vec<usize>),
}

pub const VALID_AXES: &str = "dense, expand, cluster, bias, layers, layers:<n>,<n>,...";

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown ablation axis `{s}`; valid axes: {VALID_AXES}"));
        match s {
            "dense" => Ok(Axis::Dense),
            "expand" => Ok(Axis::Expand),
            "cluster" => Ok(Axis::Cluster),
            "bias" => Ok(Axis::Bias),
            "layers" => Ok(Axis::Layers(vec![0, 2, 3, 4])),
            _ => {
                let list = s.strip_prefix("layers:").ok_or_else(bad)?;
                let layers = list
                    .split(',')
                    .map(|x| x.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                if layers.is_empty() {
                    return Err(bad());
                }
                Ok(Axis::Layers(layers))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// The runs an axis implies. Switch axes yield the base model followed by
/// the variant with that switch off; the layer axis yields one run per
/// depth. Each run writes into its own subdirectory of `base.out_dir`.
pub fn variants(base: &RunConfig, axis: &Axis) -> Vec<Variant> {
    let make = |name: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        config.out_dir = base.out_dir.join(&name);
        Variant { name, config }
    };
    match axis {
        Axis::Layers(ls) => ls
            .iter()
            .map(|&l| make(format!("layers={l}"), &|c| c.layers = l))
            .collect(),
        switch => {
            let (name, edit): (&str, &dyn Fn(&mut RunConfig)) = match switch {
                Axis::Dense => ("w/o dense", &|c| c.dense = false),
                Axis::Expand => ("w/o expand", &|c| c.expanded_field = false),
                Axis::Cluster => ("w/o cluster", &|c| c.use_clustering = false),
                Axis::Bias => ("w/o bias", &|c| c.use_bias = false),
                Axis::Layers(_) => unreachable!(),
            };
            vec![make("full".into(), &|_| {}), make(name.into(), edit)]
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub best_epoch: usize,
    pub f1: f64,
    pub ign_f1: f64,
    pub depth_f1: BTreeMap<String, f64>,
}

/// Trains every variant of `axis` and reports its best-epoch dev scores.
pub fn ablate(base: &RunConfig, axis: &Axis, corpus: &Corpus) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants(base, axis) {
        let out = train_on(&v.config, corpus)?;
        rows.push(AblationRow {
            variant: v.name,
            best_epoch: out.best_epoch,
            f1: out.best.f1(),
            ign_f1: out.best.ign_f1(),
            depth_f1: out.best.depth.iter().map(|(k, c)| (k.clone(), c.f1())).collect(),
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table, scores in percent.
pub fn format_table(rows: &[AblationRow]) -> String {
    let keys: Vec<String> = rows
        .iter()
        .flat_map(|r| r.depth_f1.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = format!("{:<14} {:>5} {:>7} {:>7}", "variant", "epoch", "F1", "IgnF1");
    for k in &keys {
        let _ = write!(s, " {:>9}", format!("d={k}"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{:<14} {:>5} {:>7.2} {:>7.2}",
            r.variant,
            r.best_epoch,
            100.0 * r.f1,
            100.0 * r.ign_f1
        );
        for k in &keys {
            match r.depth_f1.get(k) {
                Some(v) => {
                    let _ = write!(s, " {:>9.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(s, " {:>9}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
