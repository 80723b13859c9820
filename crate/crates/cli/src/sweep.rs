//! Grid over encoder width and repository size, plus a baseline row.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use dynfilter::models::ModelMode;

use crate::config::ExperimentConfig;
use crate::run::{load_datasets, train_on, Datasets};

pub const SWEEP_FILE: &str = "sweep.tsv";
pub const SWEEP_HEADER: &str = "cell\tmode\tn_enc\trepo_size\tacc_epoch1\tacc_final\tstatus";

#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub cfg: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub acc_epoch1: Option<f64>,
    pub acc_final: Option<f64>,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl CellResult {
    fn row(&self) -> String {
        let acc = |a: Option<f64>| a.map_or("NA".to_string(), |a| format!("{a:.6}"));
        let c = &self.cell.cfg;
        let repo = c.repo_size.map_or("default".to_string(), |s| s.to_string());
        let (n_enc, repo) = match c.mode {
            ModelMode::Baseline => ("-".to_string(), "-".to_string()),
            ModelMode::FilterGeneration => (c.n_enc.to_string(), repo),
        };
        format!(
            "{}\t{}\t{n_enc}\t{repo}\t{}\t{}\t{}",
            self.cell.name,
            c.mode,
            acc(self.acc_epoch1),
            acc(self.acc_final),
            self.status.replace(['\t', '\n'], " ")
        )
    }
}

/// One filter-generation cell per `(n_enc, repo_size)` pair, then the
/// baseline. Each cell trains into its own subdirectory of `base.out`.
pub fn cells(base: &ExperimentConfig, n_enc: &[usize], repo_sizes: &[Option<usize>], baseline: bool) -> Vec<Cell> {
    let mut out = Vec::new();
    for &n in n_enc {
        for &s in repo_sizes {
            let name = format!("fg_n{n}_s{}", s.map_or("default".to_string(), |s| s.to_string()));
            let mut cfg = base.clone();
            cfg.mode = ModelMode::FilterGeneration;
            cfg.n_enc = n;
            cfg.repo_size = s;
            cfg.out = base.out.join(&name);
            out.push(Cell { name, cfg });
        }
    }
    if baseline {
        let mut cfg = base.clone();
        cfg.mode = ModelMode::Baseline;
        cfg.out = base.out.join("baseline");
        out.push(Cell {
            name: "baseline".into(),
            cfg,
        });
    }
    out
}

fn run_cell(cell: &Cell, data: &Datasets) -> CellResult {
    match train_on(&cell.cfg, data) {
        Ok(r) => CellResult {
            cell: cell.clone(),
            acc_epoch1: r.first_test_acc(),
            acc_final: r.final_test_acc(),
            status: "ok".into(),
        },
        Err(e) => CellResult {
            cell: cell.clone(),
            acc_epoch1: None,
            acc_final: None,
            status: format!("error: {e:#}"),
        },
    }
}

#[cfg(feature = "parallel")]
fn run_cells(cells: &[Cell], data: &Datasets, parallel: bool) -> Vec<CellResult> {
    use rayon::prelude::*;
    if parallel {
        cells.par_iter().map(|c| run_cell(c, data)).collect()
    } else {
        cells.iter().map(|c| run_cell(c, data)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_cells(cells: &[Cell], data: &Datasets, _parallel: bool) -> Vec<CellResult> {
    cells.iter().map(|c| run_cell(c, data)).collect()
}

/// Run every cell on data loaded once. A failing cell is recorded in its
/// row and the rest still run. Returns the results and the table path.
pub fn sweep(base: &ExperimentConfig, cells: &[Cell]) -> Result<(Vec<CellResult>, PathBuf)> {
    let data = load_datasets(base)?;
    fs::create_dir_all(&base.out).with_context(|| format!("creating {}", base.out.display()))?;
    let results = run_cells(cells, &data, base.parallel);
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &results {
        writeln!(text, "{}", r.row()).unwrap();
    }
    let path = base.out.join(SWEEP_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((results, path))
}
