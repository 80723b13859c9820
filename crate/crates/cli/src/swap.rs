//! Feature-swap probe: classify every sample with filters generated from a
//! different sample.

use anyhow::{bail, Result};
use dynfilter::data::{epoch_order, Dataset};
use dynfilter::models::ModelMode;

use crate::run::{accuracy, predict, LoadedRun};

/// Stream of the shuffle used for derangements, kept apart from the
/// training epochs' streams.
const SWAP_STREAM: u64 = u64::MAX;

/// A permutation with no fixed point: each element of a seeded shuffle
/// maps to the next one, cyclically.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 1 {
        bail!("cannot derange a single sample");
    }
    let order = epoch_order(n, seed, SWAP_STREAM);
    let mut perm = vec![0; n];
    for k in 0..n {
        perm[order[k]] = order[(k + 1) % n];
    }
    Ok(perm)
}

pub struct SwapResult {
    pub accuracy: f64,
    /// `perm[i]` supplied the filters for sample `i`.
    pub perm: Vec<usize>,
}

/// Accuracy under the derangement drawn from `seed`, or under the identity
/// permutation when `identity` is set.
pub fn swap_accuracy(run: &LoadedRun, ds: &Dataset, seed: u64, identity: bool) -> Result<SwapResult> {
    if run.model.mode() != ModelMode::FilterGeneration {
        bail!("swap needs a filter-generation model; this run is {}", run.model.mode());
    }
    let perm = if identity {
        (0..ds.len()).collect()
    } else {
        derangement(ds.len(), seed)?
    };
    let preds = predict(&run.model, &run.store, ds, run.cfg.batch_size, Some(&perm))?;
    Ok(SwapResult {
        accuracy: accuracy(&preds, ds),
        perm,
    })
}
