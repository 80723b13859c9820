use super::gemm::{gemm, Layout};
use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub(crate) struct MatMulOp {
    a: Var,
    b: Var,
    dims: (usize, usize, usize),
}

impl MatMulOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        matmul_backward(tape, self.a, self.b, self.dims, g, grads);
    }
}

fn matmul_backward(tape: &Tape, a: Var, b: Var, (m, k, n): (usize, usize, usize), g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    if tape.wants(a) {
        let mut da = vec![0.0; m * k];
        let bv = tape.value(b).data();
        gemm(
            m,
            n,
            k,
            g,
            Layout::row_major(n),
            bv,
            Layout::transposed(n),
            0.0,
            &mut da,
            Layout::row_major(k),
        );
        accumulate(grads, a, da);
    }
    if tape.wants(b) {
        let mut db = vec![0.0; k * n];
        let av = tape.value(a).data();
        gemm(
            k,
            m,
            n,
            av,
            Layout::transposed(k),
            g,
            Layout::row_major(n),
            0.0,
            &mut db,
            Layout::row_major(n),
        );
        accumulate(grads, b, db);
    }
}

pub(crate) struct LinearOp {
    input: Var,
    weight: Var,
    bias: Var,
    dims: (usize, usize, usize),
}

impl LinearOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        matmul_backward(tape, self.input, self.weight, self.dims, g, grads);
        if tape.wants(self.bias) {
            let n = self.dims.2;
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            accumulate(grads, self.bias, db);
        }
    }
}

impl Tape {
    fn matmul_dims(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("{op}: expected 2-D operands, got {sa:?} and {sb:?}"));
        }
        if sa[1] != sb[0] {
            return shape_err(format!("{op}: inner dimensions differ ({sa:?} x {sb:?})"));
        }
        Ok((sa[0], sa[1], sb[1]))
    }

    fn product(&self, a: Var, b: Var, (m, k, n): (usize, usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            0.0,
            &mut out,
            Layout::row_major(n),
        );
        out
    }

    /// `a [M,K] · b [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = self.matmul_dims(a, b, "matmul")?;
        let out = self.product(a, b, dims);
        let value = Tensor::from_parts(vec![dims.0, dims.2], out);
        self.push(value, Op::MatMul(MatMulOp { a, b, dims }), &[a, b], "matmul")
    }

    /// Affine map `input [B,F] · weight [F,G] + bias [G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims = self.matmul_dims(input, weight, "linear")?;
        if self.shape(bias) != [dims.2] {
            return shape_err(format!("linear: bias shape {:?}, expected [{}]", self.shape(bias), dims.2));
        }
        let mut out = self.product(input, weight, dims);
        let bv = self.value(bias).data();
        for row in out.chunks_mut(dims.2) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::from_parts(vec![dims.0, dims.2], out);
        let op = Op::Linear(LinearOp { input, weight, bias, dims });
        self.push(value, op, &[input, weight, bias], "linear")
    }
}
