//! 2-D cross-correlation via im2col + GEMM, with shared or per-sample filters.

use super::gemm::{gemm, Layout};
use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Samples per weight-gradient partial sum. Fixed so the reduction order
/// does not depend on the execution policy.
const GRAD_CHUNK: usize = 8;

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `input` is `[B, Cin, H, W]`, `filter` is `[Cout, Cin, kh, kw]`.
    pub fn new(input: &[usize], filter: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return shape_err(format!("conv2d: input must be [B,C,H,W], got {input:?}"));
        }
        if filter.len() != 4 {
            return shape_err(format!("conv2d: filters must be [Cout,Cin,kh,kw], got {filter:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be positive");
        }
        let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, fcin, kh, kw) = (filter[0], filter[1], filter[2], filter[3]);
        if fcin != cin {
            return shape_err(format!("conv2d: filters expect {fcin} input channels but input has {cin}"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return shape_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
        }
        let out_h = (ph - kh) / stride + 1;
        let out_w = (pw - kw) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return shape_err("conv2d: zero-sized output");
        }
        Ok(Self {
            batch: b,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    fn filter_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `ox` whose input column `ox*stride + j - pad` lies inside
/// `0..width`.
fn valid_cols(g: &ConvGeometry, j: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.padding);
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(s) };
    let hi = if g.width + pad > j {
        ((g.width + pad - j - 1) / s + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let r = (c * g.kernel_h + i) * g.kernel_w + j;
                let row = &mut col[r * plane..(r + 1) * plane];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[y as usize * g.width..(y as usize + 1) * g.width];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let x0 = lo * g.stride + j - g.padding;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let r = (c * g.kernel_h + i) * g.kernel_w + j;
                let row = &col[r * plane..(r + 1) * plane];
                let (lo, hi) = valid_cols(g, j);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + j - g.padding;
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[y as usize * g.width..(y as usize + 1) * g.width];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        dst[x0..x0 + hi - lo].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    } else {
                        for (k, s) in src.iter().enumerate() {
                            dst[x0 + k * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    // im2col buffer reused across samples; every user overwrites it fully.
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// One sample: `out[Cout, P] = filters[Cout, Lk] · im2col(x) + bias`.
fn forward_sample(x: &[f64], filters: &[f64], bias: Option<&[f64]>, g: &ConvGeometry, out: &mut [f64]) {
    let (lk, plane) = (g.patch_len(), g.out_plane());
    with_scratch(lk * plane, |col| {
        im2col(x, g, col);
        gemm(
            g.out_channels,
            lk,
            plane,
            filters,
            Layout::row_major(lk),
            col,
            Layout::row_major(plane),
            0.0,
            out,
            Layout::row_major(plane),
        );
    });
    if let Some(bias) = bias {
        for (row, b) in out.chunks_mut(plane).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Gradient pieces for one sample. `dw`, when given, is accumulated into.
fn backward_sample(x: &[f64], filters: &[f64], dout: &[f64], g: &ConvGeometry, dx: Option<&mut [f64]>, dw: Option<&mut [f64]>) {
    let (lk, plane) = (g.patch_len(), g.out_plane());
    with_scratch(lk * plane, |col| {
        if let Some(dw) = dw {
            im2col(x, g, col);
            gemm(
                g.out_channels,
                plane,
                lk,
                dout,
                Layout::row_major(plane),
                col,
                Layout::transposed(plane),
                1.0,
                dw,
                Layout::row_major(lk),
            );
        }
        if let Some(dx) = dx {
            gemm(
                lk,
                g.out_channels,
                plane,
                filters,
                Layout::transposed(lk),
                dout,
                Layout::row_major(plane),
                0.0,
                col,
                Layout::row_major(plane),
            );
            col2im(col, g, dx);
        }
    });
}

pub(crate) struct ConvOp {
    input: Var,
    filters: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
    per_sample: bool,
}

impl ConvOp {
    pub(super) fn backward(&self, tape: &Tape, _node: &super::Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let geom = self.geom;
        let x = tape.value(self.input).data();
        let w = tape.value(self.filters).data();
        let want_x = tape.wants(self.input);
        let want_w = tape.wants(self.filters);
        let (in_len, out_len, f_len) = (geom.in_sample(), geom.out_sample(), geom.filter_len());
        let per_sample = self.per_sample;

        if want_x || want_w {
            let chunks = geom.batch.div_ceil(GRAD_CHUNK);
            let parts = exec::map_indexed(chunks, |ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = (lo + GRAD_CHUNK).min(geom.batch);
                let mut dx = if want_x { vec![0.0; (hi - lo) * in_len] } else { Vec::new() };
                let w_slots = if per_sample { hi - lo } else { 1 };
                let mut dw = if want_w { vec![0.0; w_slots * f_len] } else { Vec::new() };
                for b in lo..hi {
                    let filt = if per_sample { &w[b * f_len..(b + 1) * f_len] } else { w };
                    let dx_b = want_x.then(|| &mut dx[(b - lo) * in_len..(b - lo + 1) * in_len]);
                    let slot = if per_sample { b - lo } else { 0 };
                    let dw_b = want_w.then(|| &mut dw[slot * f_len..(slot + 1) * f_len]);
                    backward_sample(
                        &x[b * in_len..(b + 1) * in_len],
                        filt,
                        &g[b * out_len..(b + 1) * out_len],
                        &geom,
                        dx_b,
                        dw_b,
                    );
                }
                (dx, dw)
            });
            let mut dx_all = Vec::new();
            let mut dw_all: Vec<f64> = Vec::new();
            for (dx, dw) in parts {
                dx_all.extend_from_slice(&dx);
                if per_sample || dw_all.is_empty() {
                    dw_all.extend_from_slice(&dw);
                } else {
                    dw_all.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
            }
            if want_x {
                accumulate(grads, self.input, dx_all);
            }
            if want_w {
                accumulate(grads, self.filters, dw_all);
            }
        }

        if let Some(bias) = self.bias {
            if tape.wants(bias) {
                let plane = geom.out_plane();
                let mut db = vec![0.0; geom.out_channels];
                for sample in g.chunks(out_len) {
                    for (c, row) in sample.chunks(plane).enumerate() {
                        db[c] += row.iter().sum::<f64>();
                    }
                }
                accumulate(grads, bias, db);
            }
        }
    }
}

impl Tape {
    fn check_bias(&self, bias: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                ));
            }
        }
        Ok(())
    }

    fn run_conv(&mut self, input: Var, filters: Var, bias: Option<Var>, geom: ConvGeometry, per_sample: bool) -> Result<Var> {
        let x = self.value(input).data();
        let w = self.value(filters).data();
        let bias_data = bias.map(|b| self.value(b).data());
        let (in_len, out_len, f_len) = (geom.in_sample(), geom.out_sample(), geom.filter_len());
        let mut out = vec![0.0; geom.batch * out_len];
        exec::for_each_chunk(&mut out, out_len, |b, out_b| {
            let filt = if per_sample { &w[b * f_len..(b + 1) * f_len] } else { w };
            forward_sample(&x[b * in_len..(b + 1) * in_len], filt, bias_data, &geom, out_b);
        });
        let value = Tensor::from_parts(geom.output_shape().to_vec(), out);
        let mut inputs = vec![input, filters];
        inputs.extend(bias);
        let op = Op::Conv(ConvOp {
            input,
            filters,
            bias,
            geom,
            per_sample,
        });
        self.push(value, op, &inputs, "conv2d")
    }

    /// Cross-correlation of `input [B,Cin,H,W]` with shared `filters
    /// [Cout,Cin,kh,kw]` and optional `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(filters), stride, padding)?;
        self.check_bias(bias, geom.out_channels)?;
        self.run_conv(input, filters, bias, geom, false)
    }

    /// Like [`Tape::conv2d`] but sample `b` is convolved with its own filter
    /// set `filters[b]`, `filters` being `[B,Cout,Cin,kh,kw]`.
    pub fn conv2d_per_sample(&mut self, input: Var, filters: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let fs = self.shape(filters);
        if fs.len() != 5 {
            return shape_err(format!("conv2d_per_sample: filters must be [B,Cout,Cin,kh,kw], got {fs:?}"));
        }
        let xb = self.shape(input).first().copied().unwrap_or(0);
        if fs[0] != xb {
            return shape_err(format!("conv2d_per_sample: {} filter sets for a batch of {xb}", fs[0]));
        }
        let geom = ConvGeometry::new(self.shape(input), &fs[1..], stride, padding)?;
        self.check_bias(bias, geom.out_channels)?;
        self.run_conv(input, filters, bias, geom, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over every output position.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = vec![0.0; g.batch * g.out_sample()];
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut s = 0.0;
                        for ci in 0..g.in_channels {
                            for i in 0..g.kernel_h {
                                for j in 0..g.kernel_w {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= g.height as isize || xx >= g.width as isize {
                                        continue;
                                    }
                                    let xi = ((b * g.in_channels + ci) * g.height + y as usize) * g.width + xx as usize;
                                    let wi = ((co * g.in_channels + ci) * g.kernel_h + i) * g.kernel_w + j;
                                    s += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((b * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 1.0).collect()).unwrap()
    }

    #[test]
    fn two_by_two_diagonal_filter() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let w = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap());
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        // 1+5, 2+6, 4+8, 5+9
        assert_eq!(tape.value(y).data(), &[6., 8., 12., 14.]);
        assert_eq!(tape.value(y).data(), &naive_conv(tape.value(x), tape.value(w), 1, 0)[..]);
    }

    #[test]
    fn scalar_filter_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn matches_direct_summation_with_stride_and_padding() {
        for &(stride, pad) in &[(1, 0), (2, 2), (3, 1), (4, 0)] {
            let x = ramp(&[2, 3, 9, 8], 0.1);
            let w = ramp(&[4, 3, 3, 4], 0.05);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn table_five_first_layer_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 28, 28]));
        let w = tape.constant(Tensor::zeros(&[5, 1, 5, 5]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 24, 24]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let bad_c = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, bad_c, None, 1, 0).is_err());
        let big = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, big, None, 1, 0).is_err());
        let per = tape.constant(Tensor::zeros(&[2, 1, 2, 3, 3]));
        assert!(tape.conv2d_per_sample(x, per, None, 1, 0).is_err());
    }

    #[test]
    fn per_sample_with_replicated_filters_equals_shared_exactly() {
        let x = ramp(&[4, 2, 7, 7], 0.13);
        let w = ramp(&[3, 2, 3, 3], 0.07);
        let rep = Tensor::stack_batch(&vec![w.reshape(&[1, 3, 2, 3, 3]).unwrap(); 4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let rv = tape.constant(rep);
        let bias = tape.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let a = tape.conv2d(xv, wv, Some(bias), 2, 1).unwrap();
        let b = tape.conv2d_per_sample(xv, rv, Some(bias), 2, 1).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn per_sample_zero_and_identity_filters() {
        let x = ramp(&[2, 2, 3, 3], 0.3);
        // sample 0: zero filters; sample 1: 1x1 filter swapping the two channels
        let mut f = vec![0.0; 2 * 2 * 2];
        f[4 + 1] = 1.0; // out 0 <- in 1
        f[4 + 2] = 1.0; // out 1 <- in 0
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fv = tape.constant(Tensor::new(&[2, 2, 2, 1, 1], f).unwrap());
        let bias = tape.constant(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        let y = tape.conv2d_per_sample(xv, fv, Some(bias), 1, 0).unwrap();
        let out = tape.value(y).data();
        assert!(out[..18].iter().all(|&v| v == 0.5));
        let xs = &x.data()[18..];
        assert_eq!(&out[18..27], &xs[9..18].iter().map(|v| v + 0.5).collect::<Vec<_>>()[..]);
        assert_eq!(&out[27..36], &xs[..9].iter().map(|v| v + 0.5).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn sequential_and_parallel_paths_agree_bitwise() {
        let x = ramp(&[19, 2, 6, 6], 0.11);
        let w = ramp(&[3, 2, 3, 3], 0.09);
        let run = |parallel: bool| {
            exec::set_parallel(parallel);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = tape.mul(y, y).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(y).clone(), tape.grad(xv).unwrap(), tape.grad(wv).unwrap())
        };
        let seq = run(false);
        let par = run(true);
        exec::set_parallel(true);
        assert_eq!(seq, par);
    }
}
