//! Per-epoch metrics as tab-separated text.
//!
//! Wall time goes to a separate file so that two runs with the same
//! configuration produce byte-identical metrics logs.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "epoch\ttrain_acc\ttest_acc\tl_rec\tl_cls\tl_total";
pub const TIMING_HEADER: &str = "epoch\tseconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Means over the epoch's training batches.
    pub rec: f64,
    pub cls: f64,
    pub total: f64,
}

impl EpochMetrics {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_acc, self.test_acc, self.rec, self.cls, self.total
        )
    }

    pub fn from_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            bail!("metrics row has {} fields, expected 6: `{line}`", f.len());
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().with_context(|| format!("field {i} of `{line}`")) };
        Ok(Self {
            epoch: f[0].parse()?,
            train_acc: num(1)?,
            test_acc: num(2)?,
            rec: num(3)?,
            cls: num(4)?,
            total: num(5)?,
        })
    }
}

/// Append-only log: the header is written on creation and each completed
/// epoch appends one flushed row.
pub struct MetricsLog {
    file: File,
    timing: File,
    rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut file = File::create(metrics_path(dir))?;
        writeln!(file, "{HEADER}")?;
        let mut timing = File::create(dir.join("timing.tsv"))?;
        writeln!(timing, "{TIMING_HEADER}")?;
        Ok(Self {
            file,
            timing,
            rows: Vec::new(),
        })
    }

    pub fn append(&mut self, row: EpochMetrics, seconds: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&row.train_acc) || !(0.0..=1.0).contains(&row.test_acc) {
            bail!("accuracy outside [0, 1] in epoch {}", row.epoch);
        }
        writeln!(self.file, "{}", row.to_row())?;
        self.file.flush()?;
        writeln!(self.timing, "{}\t{seconds:.3}", row.epoch)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[EpochMetrics] {
        &self.rows
    }
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.tsv")
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        bail!("{} does not start with the metrics header", path.display());
    }
    lines.map(EpochMetrics::from_row).collect()
}
