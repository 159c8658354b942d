use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ccnet::DenseConfig;
use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{ClusteringConfig, LossSwitches};
use crate::model::ModelConfig;
use crate::tensor::optim::AdamWConfig;

/// Everything a training run needs. Read from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub min_count: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dim: usize,
    pub attn_dim: usize,
    pub bias_hidden: usize,
    pub z_dim: usize,
    pub groups: usize,
    pub layers: usize,
    pub expanded_field: bool,
    pub use_bias: bool,
    pub use_clustering: bool,
    pub dense: bool,
    pub normalize_context: bool,
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            dev_path: None,
            out_dir: PathBuf::from("runs/default"),
            seed: 1,
            epochs: 100,
            batch_size: 8,
            lr_encoder: 2e-5,
            lr_other: 1e-4,
            warmup: 0.06,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            min_count: 1,
            enc_layers: 2,
            enc_heads: 4,
            hidden: 64,
            ffn: 256,
            max_len: 512,
            dim: 64,
            attn_dim: 64,
            bias_hidden: 64,
            z_dim: 64,
            groups: 8,
            layers: 3,
            expanded_field: true,
            use_bias: true,
            use_clustering: true,
            dense: true,
            normalize_context: true,
            mu: 1.0,
            lambda: 0.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl RunConfig {
    /// Toy-encoder settings for the synthetic corpora: a one-layer encoder,
    /// so chains of facts have to be composed by the pair reasoner, larger
    /// learning rates and 60 epochs. Entity names occur too rarely to pass
    /// `min_count`, so they map to the unknown token.
    pub fn synthetic() -> Self {
        RunConfig {
            epochs: 60,
            lr_encoder: 3e-3,
            lr_other: 1e-3,
            min_count: 20,
            enc_layers: 1,
            hidden: 48,
            ffn: 96,
            enc_heads: 4,
            dim: 48,
            attn_dim: 32,
            bias_hidden: 32,
            z_dim: 32,
            groups: 4,
            ..RunConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RunConfig::default()),
            "synthetic" => Ok(RunConfig::synthetic()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected default or synthetic)"))),
        }
    }

    /// Parses config text. A `preset` key selects the starting values; the
    /// remaining keys override them regardless of order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => RunConfig::preset(v)?,
            None => RunConfig::default(),
        };
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        // Relative data paths are taken from the config file's directory.
        let base = path.as_ref().parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_path, &mut cfg.dev_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_path" => self.train_path = Some(PathBuf::from(v)),
            "dev_path" => self.dev_path = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_encoder" => self.lr_encoder = parse_num(key, v)?,
            "lr_other" => self.lr_other = parse_num(key, v)?,
            "warmup" => self.warmup = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "max_grad_norm" => self.max_grad_norm = parse_num(key, v)?,
            "min_count" => self.min_count = parse_num(key, v)?,
            "enc_layers" => self.enc_layers = parse_num(key, v)?,
            "enc_heads" => self.enc_heads = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "ffn" => self.ffn = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "attn_dim" => self.attn_dim = parse_num(key, v)?,
            "bias_hidden" => self.bias_hidden = parse_num(key, v)?,
            "z_dim" => self.z_dim = parse_num(key, v)?,
            "groups" => self.groups = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "expanded_field" => self.expanded_field = parse_bool(key, v)?,
            "use_bias" => self.use_bias = parse_bool(key, v)?,
            "use_clustering" => self.use_clustering = parse_bool(key, v)?,
            "dense" => self.dense = parse_bool(key, v)?,
            "normalize_context" => self.normalize_context = parse_bool(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses and applies a `key=value` string, as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = path(&self.train_path) {
            put("train_path", p);
        }
        if let Some(p) = path(&self.dev_path) {
            put("dev_path", p);
        }
        put("out_dir", self.out_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_encoder", format!("{:e}", self.lr_encoder));
        put("lr_other", format!("{:e}", self.lr_other));
        put("warmup", self.warmup.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("max_grad_norm", self.max_grad_norm.to_string());
        put("min_count", self.min_count.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("enc_heads", self.enc_heads.to_string());
        put("hidden", self.hidden.to_string());
        put("ffn", self.ffn.to_string());
        put("max_len", self.max_len.to_string());
        put("dim", self.dim.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("bias_hidden", self.bias_hidden.to_string());
        put("z_dim", self.z_dim.to_string());
        put("groups", self.groups.to_string());
        put("layers", self.layers.to_string());
        put("expanded_field", self.expanded_field.to_string());
        put("use_bias", self.use_bias.to_string());
        put("use_clustering", self.use_clustering.to_string());
        put("dense", self.dense.to_string());
        put("normalize_context", self.normalize_context.to_string());
        put("mu", self.mu.to_string());
        put("lambda", self.lambda.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        s
    }

    pub fn model_config(&self, vocab_size: usize, num_relations: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            num_relations,
            encoder: EncoderConfig {
                layers: self.enc_layers,
                heads: self.enc_heads,
                hidden: self.hidden,
                ffn: self.ffn,
                max_len: self.max_len,
            },
            block: DenseConfig {
                layers: self.layers,
                dim: self.dim,
                attn_dim: self.attn_dim,
                bias_hidden: self.bias_hidden,
                expanded: self.expanded_field,
                use_bias: self.use_bias,
                dense: self.dense,
            },
            z_dim: self.z_dim,
            groups: self.groups,
            normalize_context: self.normalize_context,
        }
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            mu: self.mu,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            bias: self.use_bias,
            cluster: self.use_clustering,
        }
    }

    pub fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: self.lr_encoder,
            lr_other: self.lr_other,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup,
            total_steps,
            ..AdamWConfig::default()
        }
    }
}
