use super::{accumulate, Node, Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Inputs may overshoot `[0, 1]` by this much from rounding before they are
/// treated as invalid.
const RANGE_SLACK: f64 = 1e-9;

pub(super) fn log_softmax_backward(tape: &Tape, x: Var, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let c = tape.shape(x)[1];
    let y = node.value.data();
    let mut dx = vec![0.0; g.len()];
    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
        let gs: f64 = gr.iter().sum();
        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
            *d = gv - yv.exp() * gs;
        }
    }
    accumulate(grads, x, dx);
}

pub(crate) struct BceOp {
    output: Var,
    target: Vec<f64>,
}

impl BceOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let o = tape.value(self.output).data();
        let n = o.len() as f64;
        let d = o
            .iter()
            .zip(&self.target)
            .map(|(&o, &t)| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&o) {
                    0.0
                } else {
                    g[0] * (o - t) / (o * (1.0 - o)) / n
                }
            })
            .collect();
        accumulate(grads, self.output, d);
    }
}

pub(crate) struct NllOp {
    input: Var,
    labels: Vec<usize>,
}

impl NllOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let shape = tape.shape(self.input);
        let (b, c) = (shape[0], shape[1]);
        let mut d = vec![0.0; b * c];
        for (i, &t) in self.labels.iter().enumerate() {
            d[i * c + t] = -g[0] / b as f64;
        }
        accumulate(grads, self.input, d);
    }
}

impl Tape {
    /// Row-wise log-softmax of `[B,C]` logits, stabilised by subtracting the
    /// row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return shape_err(format!("log_softmax: expected [B,C], got {:?}", v.shape()));
        }
        let c = v.shape()[1];
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|a| a - lse));
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    /// Mean binary cross entropy between probabilities `output` and
    /// `target`, both in `[0, 1]`. The mean runs over every element, which is
    /// the per-image pixel mean averaged over the batch.
    pub fn bce_loss(&mut self, output: Var, target: &Tensor) -> Result<Var> {
        let o = self.value(output);
        if o.shape() != target.shape() {
            return shape_err(format!("bce_loss: output {:?} vs target {:?}", o.shape(), target.shape()));
        }
        let in_range = |v: &f64| (-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(v);
        if !o.data().iter().all(in_range) || !target.data().iter().all(in_range) {
            return Err(Error::InvalidArgument("bce_loss: values must lie in [0, 1]".into()));
        }
        let n = o.len() as f64;
        let s: f64 = o
            .data()
            .iter()
            .zip(target.data())
            .map(|(&o, &t)| {
                let o = o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                t * o.ln() + (1.0 - t) * (1.0 - o).ln()
            })
            .sum();
        let op = Op::Bce(BceOp {
            output,
            target: target.data().to_vec(),
        });
        self.push(Tensor::scalar(-s / n), op, &[output], "bce_loss")
    }

    /// Mean over the batch of `-log_probs[b, labels[b]]`.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(log_probs);
        if v.ndim() != 2 || v.shape()[0] != labels.len() {
            return shape_err(format!("nll_loss: log-probs {:?} with {} labels", v.shape(), labels.len()));
        }
        let c = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "nll_loss: label {bad} out of range for {c} classes"
            )));
        }
        let s: f64 = labels.iter().enumerate().map(|(i, &t)| -v.data()[i * c + t]).sum();
        let value = Tensor::scalar(s / labels.len() as f64);
        let op = Op::Nll(NllOp {
            input: log_probs,
            labels: labels.to_vec(),
        });
        self.push(value, op, &[log_probs], "nll_loss")
    }
}
