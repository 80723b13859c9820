//! Flat `key=value` experiment configuration.
//!
//! Later sources override earlier ones: dataset defaults, then the config
//! file, then command-line flags. The effective configuration is written
//! next to every run's outputs, and parsing that text gives back the same
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use dynfilter::models::{DatasetKind, ModelConfig, ModelMode};
use dynfilter::nn::OptimizerKind;
use sha2::{Digest, Sha256};

/// Every accepted key, in serialisation order.
pub const KEYS: &[&str] = &[
    "dataset",
    "mode",
    "n_enc",
    "repo_size",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "momentum",
    "seed",
    "subset",
    "test_subset",
    "rec_weight",
    "warmup_epochs",
    "parallel",
    "out",
    "data_dir",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub mode: ModelMode,
    pub n_enc: usize,
    /// `None` is the default: one base filter per generated filter.
    pub repo_size: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    /// SGD only.
    pub momentum: f64,
    pub seed: u64,
    /// Training samples kept; `None` keeps all.
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub rec_weight: f64,
    /// Leading epochs trained on the reconstruction loss alone.
    pub warmup_epochs: usize,
    /// Rayon kernels; results are bit-identical either way.
    pub parallel: bool,
    pub out: PathBuf,
    pub data_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(dataset: DatasetKind) -> Self {
        let (epochs, subset, test_subset) = match dataset {
            DatasetKind::Mnist => (20, None, None),
            DatasetKind::Cifar10 => (10, Some(10_000), Some(2_000)),
        };
        Self {
            dataset,
            mode: ModelMode::FilterGeneration,
            n_enc: 20,
            repo_size: None,
            epochs,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.0,
            seed: 0,
            subset,
            test_subset,
            rec_weight: 1.0,
            warmup_epochs: 0,
            parallel: true,
            out: PathBuf::from(format!("runs/{dataset}")),
            data_dir: PathBuf::from(format!("data/{dataset}")),
        }
    }

    /// Defaults for the dataset named in `pairs` (MNIST if absent), then
    /// every pair applied in key order.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let dataset = match pairs.get("dataset") {
            Some(d) => d.parse()?,
            None => DatasetKind::Mnist,
        };
        let mut cfg = Self::defaults(dataset);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ctx = || format!("config key `{key}` = `{v}`");
        match key {
            "dataset" => self.dataset = v.parse().with_context(ctx)?,
            "mode" => self.mode = v.parse().with_context(ctx)?,
            "n_enc" => self.n_enc = v.parse().with_context(ctx)?,
            "repo_size" => self.repo_size = parse_opt(v, "default").with_context(ctx)?,
            "epochs" => self.epochs = v.parse().with_context(ctx)?,
            "batch_size" => self.batch_size = v.parse().with_context(ctx)?,
            "lr" => self.lr = v.parse().with_context(ctx)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    _ => bail!("{}: expected adam or sgd", ctx()),
                }
            }
            "momentum" => self.momentum = v.parse().with_context(ctx)?,
            "seed" => self.seed = v.parse().with_context(ctx)?,
            "subset" => self.subset = parse_opt(v, "all").with_context(ctx)?,
            "test_subset" => self.test_subset = parse_opt(v, "all").with_context(ctx)?,
            "rec_weight" => self.rec_weight = v.parse().with_context(ctx)?,
            "warmup_epochs" => self.warmup_epochs = v.parse().with_context(ctx)?,
            "parallel" => self.parallel = v.parse().with_context(ctx)?,
            "out" => self.out = PathBuf::from(v),
            "data_dir" => self.data_dir = PathBuf::from(v),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.n_enc == 0 || self.batch_size == 0 {
            bail!("n_enc and batch_size must be positive");
        }
        if self.repo_size == Some(0) {
            bail!("repo_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!("lr must be a positive number");
        }
        if !self.rec_weight.is_finite() || self.rec_weight < 0.0 {
            bail!("rec_weight must be a non-negative number");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dataset: self.dataset,
            mode: self.mode,
            n_enc: self.n_enc,
            repo_size: self.repo_size,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: self.momentum },
        }
    }

    fn value_of(&self, key: &str) -> String {
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |n| n.to_string());
        match key {
            "dataset" => self.dataset.to_string(),
            "mode" => self.mode.to_string(),
            "n_enc" => self.n_enc.to_string(),
            "repo_size" => opt(self.repo_size, "default"),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerChoice::Adam => "adam".into(),
                OptimizerChoice::Sgd => "sgd".into(),
            },
            "momentum" => self.momentum.to_string(),
            "seed" => self.seed.to_string(),
            "subset" => opt(self.subset, "all"),
            "test_subset" => opt(self.test_subset, "all"),
            "rec_weight" => self.rec_weight.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "parallel" => self.parallel.to_string(),
            "out" => self.out.display().to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            _ => unreachable!("key list and serialiser disagree"),
        }
    }

    /// One `key=value` line per key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key}={}", self.value_of(key)).unwrap();
        }
        s
    }

    /// SHA-256 of everything that affects the trained model, as hex. The
    /// output and data locations and the execution policy are excluded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| !matches!(**k, "out" | "data_dir" | "parallel")) {
            h.update(format!("{key}={}\n", self.value_of(key)));
        }
        hex::encode(h.finalize())
    }
}

fn parse_opt(v: &str, none: &str) -> Result<Option<usize>> {
    if v == none {
        Ok(None)
    } else {
        Ok(Some(v.parse()?))
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped. Unknown and
/// repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{line}`", n + 1);
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            bail!("line {}: unknown config key `{k}`", n + 1);
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            bail!("line {}: key `{k}` given twice", n + 1);
        }
    }
    Ok(out)
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_pairs(&parse_pairs(text)?)
}
