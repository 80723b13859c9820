use indexmap::IndexMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

#[derive(Default, Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Constant learning-rate SGD (optionally with momentum) or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    state: IndexMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            state: IndexMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Update every parameter from its gradient, then clear the gradients.
    /// Nothing is modified if any gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.params().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.lr;
        for (name, p) in store.params_mut() {
            let grad = p.grad.take().expect("checked above");
            let g = grad.data();
            let st = self.state.entry(name.to_string()).or_default();
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
                    } else {
                        if st.first.is_empty() {
                            st.first = vec![0.0; g.len()];
                        }
                        for ((w, g), v) in w.iter_mut().zip(g).zip(st.first.iter_mut()) {
                            *v = momentum * *v + g;
                            *w -= lr * *v;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if st.first.is_empty() {
                        st.first = vec![0.0; g.len()];
                        st.second = vec![0.0; g.len()];
                    }
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in w.iter_mut().zip(g).zip(st.first.iter_mut()).zip(st.second.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
