//! Training and evaluation of one configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dynfilter::data::{self, batches, sequential_batches, Dataset, Split};
use dynfilter::exec;
use dynfilter::models::{DynModel, ModelMode};
use dynfilter::nn::{Mode, Optimizer, ParamStore, Session, BN_MOMENTUM};
use dynfilter::{Tape, Tensor};

use crate::config::{self, ExperimentConfig};
use crate::metrics::{EpochMetrics, MetricsLog};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Seed offset for the test-split subset, so it is not tied to the
/// training subset's draw.
const TEST_SUBSET_SALT: u64 = 0x7e57;

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

/// One split, reduced to the configured subset.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let ds = data::load(cfg.dataset, &cfg.data_dir, split)
        .with_context(|| format!("loading {} {split} data from {}", cfg.dataset, cfg.data_dir.display()))?;
    Ok(match split {
        Split::Train => match cfg.subset {
            Some(n) => ds.subset(n, cfg.seed),
            None => ds,
        },
        Split::Test => match cfg.test_subset {
            Some(n) => ds.subset(n, cfg.seed ^ TEST_SUBSET_SALT),
            None => ds,
        },
    })
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: load_split(cfg, Split::Train)?,
        test: load_split(cfg, Split::Test)?,
    })
}

/// Index of the largest logit; ties go to the lower class.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(argmax).collect()
}

/// Eval-mode predictions for every sample of `ds`, in order. With
/// `feature_source`, sample `i` is classified with filters generated from
/// sample `feature_source[i]`.
pub fn predict(
    model: &DynModel,
    store: &ParamStore,
    ds: &Dataset,
    batch_size: usize,
    feature_source: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    for batch in sequential_batches(ds, batch_size)? {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Eval);
        let out = match feature_source {
            None => model.forward(&mut s, &batch.images)?,
            Some(src) => {
                let idx: Vec<usize> = batch.indices.iter().map(|&i| src[i]).collect();
                let feats = ds.images(&idx)?;
                model.forward_fg(&mut s, &batch.images, &feats)?
            }
        };
        preds.extend(argmax_rows(tape.value(out.logits)));
    }
    Ok(preds)
}

/// Fraction of correct predictions; 0 for an empty set.
pub fn accuracy(preds: &[usize], ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().enumerate().filter(|&(i, &p)| p == ds.label(i)).count();
    correct as f64 / ds.len() as f64
}

pub fn evaluate(model: &DynModel, store: &ParamStore, ds: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(accuracy(&predict(model, store, ds, batch_size, None)?, ds))
}

pub struct TrainReport {
    pub out: PathBuf,
    pub rows: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn first_test_acc(&self) -> Option<f64> {
        self.rows.first().map(|r| r.test_acc)
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let data = load_datasets(cfg)?;
    train_on(cfg, &data)
}

/// Full training run into `cfg.out`: config, manifest, metrics, timing and
/// final checkpoint.
pub fn train_on(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainReport> {
    exec::set_parallel(cfg.parallel);
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let model = DynModel::new(cfg.model_config())?;
    let mut store = model.init(cfg.seed)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(
        cfg.out.join(MANIFEST_FILE),
        format!(
            "config_sha256={}\nparameters={}\n{}",
            cfg.hash(),
            store.num_elements(),
            model.manifest()
        ),
    )?;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.lr);
    let mut log = MetricsLog::create(&cfg.out)?;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let warmup = epoch < cfg.warmup_epochs && cfg.mode == ModelMode::FilterGeneration;
        let (mut rec_sum, mut cls_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let (mut correct, mut seen, mut n_batches) = (0usize, 0usize, 0usize);
        for (bi, batch) in batches(&data.train, cfg.batch_size, cfg.seed, epoch as u64)?.enumerate() {
            let at = || format!("epoch {} batch {bi}", epoch + 1);
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store, Mode::Train);
            let out = model.forward(&mut s, &batch.images).with_context(at)?;
            let loss = model
                .loss(&mut s, &out, &batch.images, &batch.labels, cfg.rec_weight)
                .with_context(at)?;
            let bindings = s.finish();
            let (rec, cls, total) = loss.values(&tape);
            if !(rec.is_finite() && cls.is_finite() && total.is_finite()) {
                bail!("{}: non-finite loss (rec={rec}, cls={cls}, total={total})", at());
            }
            correct += argmax_rows(tape.value(out.logits))
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(if warmup { loss.rec } else { loss.total }).with_context(at)?;
            bindings.write_gradients(&tape, &mut store)?;
            store.apply_batch_stats(&bindings.batch_stats, BN_MOMENTUM)?;
            opt.step(&mut store).with_context(at)?;
            rec_sum += rec;
            cls_sum += cls;
            total_sum += total;
            seen += batch.labels.len();
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            test_acc: evaluate(&model, &store, &data.test, cfg.batch_size)?,
            rec: rec_sum / nb,
            cls: cls_sum / nb,
            total: total_sum / nb,
        };
        log.append(row, start.elapsed().as_secs_f64())?;
    }
    store.save(cfg.out.join(CHECKPOINT_FILE))?;
    Ok(TrainReport {
        out: cfg.out.clone(),
        rows: log.rows().to_vec(),
    })
}

/// A trained model loaded back from its run directory.
pub struct LoadedRun {
    pub cfg: ExperimentConfig,
    pub model: DynModel,
    pub store: ParamStore,
}

/// Rebuild the model described by `cfg` and fill it from `checkpoint`
/// (default: the run directory's checkpoint).
pub fn load_run(cfg: ExperimentConfig, checkpoint: Option<&Path>) -> Result<LoadedRun> {
    exec::set_parallel(cfg.parallel);
    let path = checkpoint.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let model = DynModel::new(cfg.model_config())?;
    let mut store = model.init(cfg.seed)?;
    let saved = ParamStore::load(&path).with_context(|| format!("reading {}", path.display()))?;
    store
        .load_values_from(&saved)
        .with_context(|| format!("{} does not fit the configured model", path.display()))?;
    Ok(LoadedRun { cfg, model, store })
}

/// The configuration saved in a run directory.
pub fn read_run_config(dir: &Path) -> Result<String> {
    let path = dir.join(CONFIG_FILE);
    fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

/// Parse a saved configuration, check it, and hand it back.
pub fn parse_run_config(text: &str) -> Result<ExperimentConfig> {
    config::parse(text)
}
