//! Per-sample internals of the dynamic layers as TSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dynfilter::data::{sequential_batches, Dataset};
use dynfilter::models::{ModelMode, ModelOutput};
use dynfilter::nn::{Mode, Session};
use dynfilter::{Tape, Tensor, Var};

use crate::run::LoadedRun;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Coefficients,
    Filters,
    Features,
    Featmaps,
}

impl ExportKind {
    pub const ALL: [ExportKind; 4] = [Self::Coefficients, Self::Filters, Self::Features, Self::Featmaps];

    pub fn name(self) -> &'static str {
        match self {
            Self::Coefficients => "coefficients",
            Self::Filters => "filters",
            Self::Features => "features",
            Self::Featmaps => "featmaps",
        }
    }

    fn pick(self, out: &ModelOutput) -> &[Var] {
        match self {
            Self::Coefficients => &out.coefficients,
            Self::Filters => &out.filters,
            Self::Features => &out.features,
            Self::Featmaps => &out.featmaps,
        }
    }
}

impl FromStr for ExportKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .with_context(|| format!("unknown export kind `{s}`; expected coefficients, filters, features or featmaps"))
    }
}

pub fn export_path(dir: &Path, kind: ExportKind, layer: usize) -> PathBuf {
    dir.join(format!("{}_layer{}.tsv", kind.name(), layer + 1))
}

/// Write one file per dynamic layer into `dir`: a header, then one row per
/// sample with its label followed by the flattened values. Returns the
/// paths written.
pub fn export(run: &LoadedRun, ds: &Dataset, kind: ExportKind, dir: &Path) -> Result<Vec<PathBuf>> {
    if run.model.mode() != ModelMode::FilterGeneration {
        bail!("export needs a filter-generation model; this run is {}", run.model.mode());
    }
    let widths = widths(run, kind)?;
    let mut files: Vec<String> = widths
        .iter()
        .map(|&w| {
            let mut h = String::from("label");
            for j in 0..w {
                write!(h, "\tv{j}").unwrap();
            }
            h.push('\n');
            h
        })
        .collect();
    for batch in sequential_batches(ds, run.cfg.batch_size)? {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &run.store, Mode::Eval);
        let out = run.model.forward(&mut s, &batch.images)?;
        for (file, &v) in files.iter_mut().zip(kind.pick(&out)) {
            let t = tape.value(v);
            let w = t.len() / batch.labels.len();
            for (row, label) in t.data().chunks(w).zip(&batch.labels) {
                write!(file, "{label}").unwrap();
                for x in row {
                    write!(file, "\t{x:.8e}").unwrap();
                }
                file.push('\n');
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::with_capacity(files.len());
    for (k, text) in files.iter().enumerate() {
        let p = export_path(dir, kind, k);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Per-sample row width of each layer's export, found by pushing one blank
/// image through the model so that empty splits still get a full header.
fn widths(run: &LoadedRun, kind: ExportKind) -> Result<Vec<usize>> {
    let [c, h, w] = run.cfg.dataset.image_shape();
    let blank = Tensor::zeros(&[1, c, h, w]);
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &run.store, Mode::Eval);
    let out = run.model.forward(&mut s, &blank)?;
    Ok(kind.pick(&out).iter().map(|&v| tape.value(v).len()).collect())
}
