use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dynfilter::data::Split;

use dynfilter_cli::config::{self, ExperimentConfig};
use dynfilter_cli::export::{export, ExportKind};
use dynfilter_cli::gradcheck::{self, check_model};
use dynfilter_cli::run::{self, evaluate, load_run, load_split, LoadedRun};
use dynfilter_cli::swap::swap_accuracy;
use dynfilter_cli::sweep::{cells, sweep};

#[derive(Parser)]
#[command(
    name = "dynfilter",
    version,
    about = "Train and probe dynamic filter generation models",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Configuration overrides shared by every subcommand.
#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// mnist or cifar10
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// baseline or fg
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    n_enc: Option<usize>,
    /// Base filters per repository, or "default"
    #[arg(long, global = true)]
    repo_size: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training samples to keep, or "all"
    #[arg(long, global = true)]
    subset: Option<String>,
    /// Run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Any other config key, as key=value; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn pairs(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("dataset", self.dataset.clone());
        put("mode", self.mode.clone());
        put("n_enc", self.n_enc.map(|v| v.to_string()));
        put("repo_size", self.repo_size.clone());
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("subset", self.subset.clone());
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let extra = config::parse_pairs(kv).with_context(|| format!("--set {kv}"))?;
            m.extend(extra);
        }
        Ok(m)
    }

    /// Defaults, then the config file, then flags.
    fn resolve(&self, base: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let mut pairs = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(config::parse_pairs(&text).with_context(|| format!("in {}", path.display()))?);
        }
        pairs.extend(self.pairs()?);
        ExperimentConfig::from_pairs(&pairs)
    }

    /// A trained run: its saved configuration, overridden by the file and
    /// flags, with the checkpoint loaded.
    fn load(&self, checkpoint: Option<&Path>) -> Result<LoadedRun> {
        let dir = self.resolve(BTreeMap::new())?.out;
        let saved = config::parse_pairs(&run::read_run_config(&dir)?)?;
        load_run(self.resolve(saved)?, checkpoint)
    }
}

#[derive(Args)]
struct Target {
    /// Split to run on
    #[arg(long, default_value = "test")]
    split: Split,
    /// Checkpoint to load instead of the run directory's
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model into the run directory
    Train,
    /// Top-1 accuracy of a trained run
    Eval {
        #[command(flatten)]
        target: Target,
    },
    /// Accuracy when every sample's filters come from a different sample
    Swap {
        #[command(flatten)]
        target: Target,
        /// Seed of the derangement; defaults to the run seed
        #[arg(long)]
        swap_seed: Option<u64>,
        /// Use the identity permutation instead
        #[arg(long)]
        identity: bool,
    },
    /// Per-sample coefficients, filters, features or feature maps as TSV
    Export {
        #[command(flatten)]
        target: Target,
        /// coefficients, filters, features or featmaps
        #[arg(long)]
        what: ExportKind,
        /// Output directory; defaults to <run>/export
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Train a grid of encoder widths and repository sizes plus a baseline
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        n_enc_grid: Vec<usize>,
        /// Repository sizes; "default" means one per generated filter
        #[arg(long, value_delimiter = ',', default_value = "5")]
        s_grid: Vec<String>,
        #[arg(long)]
        no_baseline: bool,
    },
    /// Finite-difference check of every parameter gradient
    Gradcheck {
        /// Coordinates checked per parameter
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = gradcheck::TOLERANCE)]
        tol: f64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Train => {
            let cfg = c.resolve(BTreeMap::new())?;
            let report = run::train(&cfg)?;
            match report.rows.last() {
                Some(r) => println!(
                    "epochs={} train_acc={:.6} test_acc={:.6} out={}",
                    r.epoch,
                    r.train_acc,
                    r.test_acc,
                    report.out.display()
                ),
                None => println!("epochs=0 out={}", report.out.display()),
            }
        }
        Command::Eval { target } => {
            let run = c.load(target.checkpoint.as_deref())?;
            let ds = load_split(&run.cfg, target.split)?;
            let acc = evaluate(&run.model, &run.store, &ds, run.cfg.batch_size)?;
            println!("split={} samples={} accuracy={acc:.6}", target.split, ds.len());
        }
        Command::Swap {
            target,
            swap_seed,
            identity,
        } => {
            let run = c.load(target.checkpoint.as_deref())?;
            let ds = load_split(&run.cfg, target.split)?;
            let r = swap_accuracy(&run, &ds, swap_seed.unwrap_or(run.cfg.seed), *identity)?;
            println!(
                "split={} samples={} permutation={} accuracy={:.6}",
                target.split,
                ds.len(),
                if *identity { "identity" } else { "derangement" },
                r.accuracy
            );
        }
        Command::Export { target, what, export_dir } => {
            let run = c.load(target.checkpoint.as_deref())?;
            let ds = load_split(&run.cfg, target.split)?;
            let dir = export_dir.clone().unwrap_or_else(|| run.cfg.out.join("export"));
            for p in export(&run, &ds, *what, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep {
            n_enc_grid,
            s_grid,
            no_baseline,
        } => {
            let base = c.resolve(BTreeMap::new())?;
            let sizes = s_grid
                .iter()
                .map(|s| match s.as_str() {
                    "default" => Ok(None),
                    n => n.parse().map(Some).with_context(|| format!("bad repository size `{n}`")),
                })
                .collect::<Result<Vec<_>>>()?;
            if n_enc_grid.is_empty() && !*no_baseline {
                bail!("empty grid");
            }
            let (results, path) = sweep(&base, &cells(&base, n_enc_grid, &sizes, !*no_baseline))?;
            print!("{}", fs::read_to_string(&path)?);
            let failed = results.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", results.len());
            }
        }
        Command::Gradcheck { coords, tol } => {
            let cfg = c.resolve(BTreeMap::new())?;
            let checks = check_model(cfg.model_config(), cfg.seed, *coords, *tol)?;
            let mut worst = 0.0f64;
            for pc in &checks {
                worst = worst.max(pc.report.max_rel_error);
                let refined = pc
                    .refined
                    .as_ref()
                    .map_or(String::new(), |r| format!("\trefined_rel={:.3e}", r.max_rel_error));
                println!(
                    "{}\t{}\trel={:.3e}\tabs={:.3e}\t{}{refined}",
                    if pc.passed() { "ok" } else { "FAIL" },
                    pc.name,
                    pc.report.max_rel_error,
                    pc.report.max_abs_error,
                    pc.report.checked
                );
            }
            let refined = checks.iter().filter(|pc| pc.refined.is_some()).count();
            println!("parameters={} worst_rel={worst:.3e} refined={refined} tol={tol:e}", checks.len());
            if checks.iter().any(|pc| !pc.passed()) {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
