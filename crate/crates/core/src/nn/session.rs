use indexmap::IndexMap;

use super::params::ParamStore;
use crate::autograd::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds store parameters to tape leaves (once per name)
/// and collects batch-norm statistics for the caller to commit.
pub struct Session<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    mode: Mode,
    bound: IndexMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

/// What a finished [`Session`] leaves behind.
#[derive(Debug, Default)]
pub struct Bindings {
    pub params: IndexMap<String, Var>,
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Bindings {
    /// Gradients of every bound parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape) -> Vec<(String, Option<Tensor>)> {
        self.params.iter().map(|(name, &v)| (name.clone(), tape.grad(v))).collect()
    }

    /// Copy gradients into `store`; parameters the loss did not reach get
    /// zeros.
    pub fn write_gradients(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.gradients(tape) {
            let g = match g {
                Some(g) => g,
                None => Tensor::zeros(store.param(&name)?.shape()),
            };
            store.set_grad(&name, g)?;
        }
        Ok(())
    }
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: IndexMap::new(),
            stats: Vec::new(),
        }
    }

    /// Substitute an existing tape node for the named parameter.
    pub fn with_override(mut self, name: impl Into<String>, var: Var) -> Self {
        self.bound.insert(name.into(), var);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.tape.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub(crate) fn record_stats(&mut self, prefix: String, stats: BatchStats) {
        self.stats.push((prefix, stats));
    }

    pub fn finish(self) -> Bindings {
        Bindings {
            params: self.bound,
            batch_stats: self.stats,
        }
    }
}
