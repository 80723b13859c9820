use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Scalar loss nodes of one batch. `rec` is a zero constant when there is
/// no reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub rec: Var,
    pub cls: Var,
    pub total: Var,
}

impl LossBundle {
    /// `(rec, cls, total)` values.
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        let v = |x| tape.value(x).data()[0];
        (v(self.rec), v(self.cls), v(self.total))
    }
}

/// Mean binary cross-entropy over every pixel (and channel) of the batch.
pub fn bce_reconstruction_loss(tape: &mut Tape, output: Var, target: &Tensor) -> Result<Var> {
    tape.bce_loss(output, target)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn nll_classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    tape.nll_loss(lp, labels)
}

/// `total = rec_weight * rec + cls`; with weight 1 the sum is computed
/// directly, so `total == rec + cls` holds bit for bit.
pub fn total_loss(tape: &mut Tape, rec: Option<Var>, logits: Var, labels: &[usize], rec_weight: f64) -> Result<LossBundle> {
    let cls = nll_classification_loss(tape, logits, labels)?;
    let Some(rec) = rec else {
        let rec = tape.constant(Tensor::scalar(0.0));
        return Ok(LossBundle { rec, cls, total: cls });
    };
    let weighted = if rec_weight == 1.0 { rec } else { tape.scale(rec, rec_weight)? };
    let total = tape.add(weighted, cls)?;
    Ok(LossBundle { rec, cls, total })
}
