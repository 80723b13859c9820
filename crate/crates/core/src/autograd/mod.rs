//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed in a forward pass as a node
//! holding its output value and enough saved state to run the backward pass.
//! Nodes are appended in execution order, so the tape is already
//! topologically sorted; [`Tape::backward`] walks it once in reverse and
//! accumulates gradients into each input in insertion order.
//!
//! ```
//! use dynfilter::autograd::Tape;
//! use dynfilter::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod conv;
mod gemm;
mod gradcheck;
mod linalg;
mod loss;
mod norm;
mod pool;

pub use conv::ConvGeometry;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use loss::BCE_CLAMP;
pub use norm::{BatchStats, BnMode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Conv(conv::ConvOp),
    MaxPool(pool::MaxPoolOp),
    AvgPool(pool::AvgPoolOp),
    Upsample(pool::UpsampleOp),
    BatchNorm(norm::BatchNormOp),
    Linear(linalg::LinearOp),
    MatMul(linalg::MatMulOp),
    LogSoftmax(Var),
    Bce(loss::BceOp),
    Nll(loss::NllOp),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Only leaves with `requires_grad` (and nodes
    /// depending on them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    /// Drop gradients so [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, op, &[x], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, factor), "scale", |a| a * factor)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Collapse everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |a| if a >= 0.0 { a } else { 0.0 })
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map(x, Op::LeakyRelu(x, slope), "leaky_relu", |a| if a >= 0.0 { a } else { slope * a })
    }

    /// Logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// Reverse pass from a scalar `loss`. Fails if run twice without
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape; call zero_grad first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss is not connected to any tensor that requires grad".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|g| g * f).collect()),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(g, &a)| if a >= 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(g, &a)| if a >= 0.0 { *g } else { slope * g }).collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, d);
            }
            Op::Conv(op) => op.backward(self, node, g, grads),
            Op::MaxPool(op) => op.backward(self, g, grads),
            Op::AvgPool(op) => op.backward(self, g, grads),
            Op::Upsample(op) => op.backward(self, g, grads),
            Op::BatchNorm(op) => op.backward(self, g, grads),
            Op::Linear(op) => op.backward(self, g, grads),
            Op::MatMul(op) => op.backward(self, g, grads),
            Op::LogSoftmax(x) => loss::log_softmax_backward(self, *x, node, g, grads),
            Op::Bce(op) => op.backward(self, g, grads),
            Op::Nll(op) => op.backward(self, g, grads),
        }
        Ok(())
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
