use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

fn pool_geom(shape: &[usize], kernel: usize, stride: usize, op: &str) -> Result<PoolGeom> {
    if shape.len() != 4 {
        return shape_err(format!("{op}: input must be [B,C,H,W], got {shape:?}"));
    }
    if kernel == 0 || stride == 0 {
        return shape_err(format!("{op}: kernel and stride must be positive"));
    }
    let (h, w) = (shape[2], shape[3]);
    if kernel > h || kernel > w {
        return shape_err(format!("{op}: kernel {kernel} larger than input {h}x{w}"));
    }
    Ok(PoolGeom {
        planes: shape[0] * shape[1],
        h,
        w,
        kernel,
        stride,
        oh: (h - kernel) / stride + 1,
        ow: (w - kernel) / stride + 1,
    })
}

pub(crate) struct MaxPoolOp {
    input: Var,
    /// Flat input index of the selected element, per output element.
    argmax: Vec<usize>,
}

impl MaxPoolOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut dx = vec![0.0; tape.value(self.input).len()];
        for (&i, gv) in self.argmax.iter().zip(g) {
            dx[i] += gv;
        }
        accumulate(grads, self.input, dx);
    }
}

pub(crate) struct AvgPoolOp {
    input: Var,
    geom: PoolGeom,
}

impl AvgPoolOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let p = self.geom;
        let mut dx = vec![0.0; tape.value(self.input).len()];
        let norm = 1.0 / (p.kernel * p.kernel) as f64;
        for plane in 0..p.planes {
            let base = plane * p.h * p.w;
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let gv = g[(plane * p.oh + oy) * p.ow + ox] * norm;
                    for i in 0..p.kernel {
                        let row = base + (oy * p.stride + i) * p.w + ox * p.stride;
                        dx[row..row + p.kernel].iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
        }
        accumulate(grads, self.input, dx);
    }
}

pub(crate) struct UpsampleOp {
    input: Var,
    factor: usize,
}

impl UpsampleOp {
    pub(super) fn backward(&self, tape: &Tape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let shape = tape.shape(self.input);
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut dx = vec![0.0; planes * h * w];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx[(p * h + oy / f) * w + ox / f] += g[(p * oh + oy) * ow + ox];
                }
            }
        }
        accumulate(grads, self.input, dx);
    }
}

impl Tape {
    /// Window maximum. Ties resolve to the first element in row-major
    /// window order, which is also where the gradient is routed.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let p = pool_geom(x.shape(), kernel, stride, "maxpool2d")?;
        let xd = x.data();
        let mut out = Vec::with_capacity(p.planes * p.oh * p.ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..p.planes {
            let base = plane * p.h * p.w;
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let mut best = base + oy * p.stride * p.w + ox * p.stride;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = base + (oy * p.stride + i) * p.w + ox * p.stride + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![x.shape()[0], x.shape()[1], p.oh, p.ow];
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::MaxPool(MaxPoolOp { input, argmax }), &[input], "maxpool2d")
    }

    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let p = pool_geom(x.shape(), kernel, stride, "avgpool2d")?;
        let xd = x.data();
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(p.planes * p.oh * p.ow);
        for plane in 0..p.planes {
            let base = plane * p.h * p.w;
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let mut s = 0.0;
                    for i in 0..kernel {
                        let row = base + (oy * p.stride + i) * p.w + ox * p.stride;
                        s += xd[row..row + kernel].iter().sum::<f64>();
                    }
                    out.push(s * norm);
                }
            }
        }
        let shape = vec![x.shape()[0], x.shape()[1], p.oh, p.ow];
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::AvgPool(AvgPoolOp { input, geom: p }), &[input], "avgpool2d")
    }

    /// Nearest-neighbour upsampling by an integer `factor`.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return shape_err("upsample_nearest: factor must be positive");
        }
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() != 4 {
            return shape_err(format!("upsample_nearest: input must be [B,C,H,W], got {shape:?}"));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                let row = &xd[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                out.extend((0..ow).map(|ox| row[ox / factor]));
            }
        }
        let value = Tensor::from_parts(vec![shape[0], shape[1], oh, ow], out);
        self.push(value, Op::Upsample(UpsampleOp { input, factor }), &[input], "upsample_nearest")
    }
}
