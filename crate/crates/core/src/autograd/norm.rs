use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Which statistics batch normalisation uses.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate, which is what the running average tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub(crate) struct BatchNormOp {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    dims: (usize, usize, usize),
}

impl BatchNormOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (b, c, hw) = self.dims;
        let gamma = tape.value(self.gamma).data();
        let n = (b * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for (gk, xk) in g[off..off + hw].iter().zip(&self.xhat[off..off + hw]) {
                    dgamma[ch] += gk * xk;
                    dbeta[ch] += gk;
                }
            }
        }
        if tape.wants(self.input) {
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                for s in 0..b {
                    let off = (s * c + ch) * hw;
                    for k in off..off + hw {
                        dx[k] = if self.train {
                            scale / n * (n * g[k] - dbeta[ch] - self.xhat[k] * dgamma[ch])
                        } else {
                            scale * g[k]
                        };
                    }
                }
            }
            accumulate(grads, self.input, dx);
        }
        if tape.wants(self.gamma) {
            accumulate(grads, self.gamma, dgamma);
        }
        if tape.wants(self.beta) {
            accumulate(grads, self.beta, dbeta);
        }
    }
}

impl Tape {
    /// Per-channel batch normalisation of `[B,C,H,W]`. In train mode the
    /// batch statistics are returned for the caller's running average.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>, eps: f64) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return shape_err(format!("batchnorm2d: input must be [B,C,H,W], got {shape:?}"));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batchnorm2d: gamma/beta must have length {c}, got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let n = b * hw;
        let x = self.value(input).data();
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return shape_err("batchnorm2d: train mode needs more than one value per channel");
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..b {
                        let off = (smp * c + ch) * hw;
                        s += x[off..off + hw].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut q = 0.0;
                    for smp in 0..b {
                        let off = (smp * c + ch) * hw;
                        q += x[off..off + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / n as f64;
                }
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batchnorm2d: running statistics length mismatch");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for smp in 0..b {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for k in off..off + hw {
                    xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                    out[k] = gd[ch] * xhat[k] + bd[ch];
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let op = Op::BatchNorm(BatchNormOp {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train: stats.is_some(),
            dims: (b, c, hw),
        });
        let v = self.push(value, op, &[input, gamma, beta], "batchnorm2d")?;
        Ok((v, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;

    fn affine(tape: &mut Tape, c: usize, g: f64, b: f64) -> (Var, Var) {
        (tape.constant(Tensor::full(&[c], g)), tape.constant(Tensor::full(&[c], b)))
    }

    #[test]
    fn constant_channels_map_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2, 1, 2], vec![3., 3., -1., -1., 3., 3., -1., -1.]).unwrap());
        let (g, b) = affine(&mut tape, 2, 1.7, 0.25);
        let (y, _) = tape.batchnorm2d(x, g, b, BnMode::Train, EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn symmetric_pair_normalises_to_unit() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![-1.0, 1.0]).unwrap());
        let (g, b) = affine(&mut tape, 1, 1.0, 0.0);
        let (y, stats) = tape.batchnorm2d(x, g, b, BnMode::Train, EPS).unwrap();
        let s = 1.0 / (1.0 + EPS).sqrt();
        assert_eq!(tape.value(y).data(), &[-s, s]);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn eval_with_unit_stats_is_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![-2.0, 0.5, 4.0]).unwrap());
        let (g, b) = affine(&mut tape, 1, 3.0, -1.0);
        let (mean, var) = ([0.0], [1.0 - EPS]);
        let (y, stats) = tape.batchnorm2d(x, g, b, BnMode::Eval { mean: &mean, var: &var }, EPS).unwrap();
        assert!(stats.is_none());
        for (o, i) in tape.value(y).data().iter().zip([-2.0, 0.5, 4.0]) {
            assert!((o - (3.0 * i - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_batch_is_rejected_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
        let (g, b) = affine(&mut tape, 3, 1.0, 0.0);
        assert!(tape.batchnorm2d(x, g, b, BnMode::Train, EPS).is_err());
    }

    #[test]
    fn running_stats_update_rule() {
        let mut r = RunningStats::new(1);
        r.update(
            &BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
            0.1,
        );
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batch_statistics_ignore_sample_order() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let mut swapped = data[12..].to_vec();
        swapped.extend_from_slice(&data[..12]);
        let stats = |d: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[2, 3, 2, 2], d).unwrap());
            let (g, b) = affine(&mut tape, 3, 1.0, 0.0);
            tape.batchnorm2d(x, g, b, BnMode::Train, EPS).unwrap().1.unwrap()
        };
        let (a, b) = (stats(data), stats(swapped));
        for (x, y) in a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
