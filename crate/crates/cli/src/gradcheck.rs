//! Finite-difference check of every parameter gradient of a full model.

use anyhow::{Context, Result};
use dynfilter::autograd::{gradcheck, GradcheckOptions, GradcheckReport};
use dynfilter::models::{DynModel, ModelConfig};
use dynfilter::nn::{Mode, Session};
use dynfilter::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BATCH: usize = 4;
/// Relative error bound, `max |a - n| / max(|a|, |n|)` per parameter.
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
/// Step used to re-check a parameter that fails at [`EPS`]. A central
/// difference that straddles a ReLU or max-pool kink disagrees with the
/// one-sided analytic gradient by an amount that shrinks with the step.
pub const REFINED_EPS: f64 = 1e-6;

pub struct ParamCheck {
    pub name: String,
    pub report: GradcheckReport,
    /// The re-check at [`REFINED_EPS`], present only if `report` failed.
    pub refined: Option<GradcheckReport>,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.report.passed || self.refined.as_ref().is_some_and(|r| r.passed)
    }
}

/// `k` evenly spaced flat indices of a `len`-element tensor, always
/// including the first and last.
pub fn spread(len: usize, k: usize) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    if k <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1)).collect();
    v.dedup();
    v
}

/// Train-mode joint loss on a seeded random batch, differentiated with
/// respect to each parameter in turn and compared at `coords` coordinates.
pub fn check_model(config: ModelConfig, seed: u64, coords: usize, tol: f64) -> Result<Vec<ParamCheck>> {
    let model = DynModel::new(config)?;
    let store = model.init(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = config.dataset.image_shape();
    let n = BATCH * c * h * w;
    let images = Tensor::new(&[BATCH, c, h, w], (0..n).map(|_| rng.random::<f64>()).collect())?;
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..config.dataset.num_classes())).collect();

    let mut out = Vec::new();
    for name in store.param_names() {
        let x = store.param(&name)?.clone();
        let check = |eps: f64| {
            let opts = GradcheckOptions {
                eps,
                tol,
                coords: Some(spread(x.len(), coords)),
            };
            gradcheck(
                |tape, v| {
                    let mut s = Session::new(tape, &store, Mode::Train).with_override(name.clone(), v);
                    let fwd = model.forward(&mut s, &images)?;
                    Ok(model.loss(&mut s, &fwd, &images, &labels, 1.0)?.total)
                },
                &x,
                &opts,
            )
            .with_context(|| format!("checking {name}"))
        };
        let report = check(EPS)?;
        let refined = if report.passed { None } else { Some(check(REFINED_EPS)?) };
        out.push(ParamCheck { name, report, refined });
    }
    Ok(out)
}
