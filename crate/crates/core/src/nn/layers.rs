//! Layer specifications and sequential chains built from them.
//!
//! A chain is the code form of one architecture table: each [`LayerSpec`] is
//! a row with its kernel, stride and padding, and
//! [`Chain::output_shapes`] reproduces the table's output-size column.

use std::fmt;

use rand::RngCore;

use super::init::init_kaiming;
use super::params::ParamStore;
use super::session::{Mode, Session};
use super::{BN_EPS, DEFAULT_LRELU_SLOPE};
use crate::autograd::{BnMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvReLU,
    ConvBNReLU,
    ConvBNLReLU,
    MaxPool,
    AvgPool,
    Upsample,
    Linear,
    LinearLReLU,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::ConvReLU | LayerKind::ConvBNReLU | LayerKind::ConvBNLReLU
        )
    }

    pub fn has_bn(self) -> bool {
        matches!(self, LayerKind::ConvBNReLU | LayerKind::ConvBNLReLU)
    }

    fn is_linear(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::LinearLReLU)
    }
}

/// One row of an architecture table. For `Upsample` the scale factor is
/// stored in `stride`; pooling and upsampling ignore the channel fields.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Negative slope of the leaky ReLU variants.
    pub slope: f64,
}

impl LayerSpec {
    pub fn conv(kind: LayerKind, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kind.is_conv(), "{kind:?} is not a convolution kind");
        Self {
            kind,
            kernel: (kernel, kernel),
            stride,
            padding,
            in_channels,
            out_channels,
            slope: DEFAULT_LRELU_SLOPE,
        }
    }

    fn window(kind: LayerKind, kernel: usize, stride: usize) -> Self {
        Self {
            kind,
            kernel: (kernel, kernel),
            stride,
            padding: 0,
            in_channels: 0,
            out_channels: 0,
            slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn maxpool(kernel: usize, stride: usize) -> Self {
        Self::window(LayerKind::MaxPool, kernel, stride)
    }

    pub fn avgpool(kernel: usize, stride: usize) -> Self {
        Self::window(LayerKind::AvgPool, kernel, stride)
    }

    pub fn upsample(factor: usize) -> Self {
        Self::window(LayerKind::Upsample, 1, factor)
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: in_features,
            out_channels: out_features,
            slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn linear_lrelu(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::LinearLReLU,
            ..Self::linear(in_features, out_features)
        }
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }

    /// Flattened filter length `Cin*kh*kw` of a convolution row.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Output shape for one sample (`[C,H,W]` or `[F]`).
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = |input: &[usize]| -> std::result::Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!("expects a [C,H,W] input, got {input:?}")),
            }
        };
        match self.kind {
            k if k.is_conv() => {
                let (c, h, w) = spatial(input)?;
                if c != self.in_channels {
                    return Err(format!("expects {} channels, got {c}", self.in_channels));
                }
                let (kh, kw) = self.kernel;
                let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
                if kh > ph || kw > pw || self.stride == 0 {
                    return Err(format!("kernel {kh}x{kw} does not fit {ph}x{pw}"));
                }
                Ok(vec![self.out_channels, (ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1])
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let (c, h, w) = spatial(input)?;
                let k = self.kernel.0;
                if k > h || k > w || self.stride == 0 {
                    return Err(format!("window {k} does not fit {h}x{w}"));
                }
                Ok(vec![c, (h - k) / self.stride + 1, (w - k) / self.stride + 1])
            }
            LayerKind::Upsample => {
                let (c, h, w) = spatial(input)?;
                Ok(vec![c, h * self.stride, w * self.stride])
            }
            _ => {
                let f: usize = input.iter().product();
                if f != self.in_channels {
                    return Err(format!("expects {} features, got {f}", self.in_channels));
                }
                Ok(vec![self.out_channels])
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Upsample => write!(f, "Upsample x{}", self.stride),
            LayerKind::MaxPool | LayerKind::AvgPool => {
                write!(f, "{:?} {kh}x{kw}/{}/{}", self.kind, self.stride, self.padding)
            }
            LayerKind::Linear | LayerKind::LinearLReLU => {
                write!(f, "{:?} {}->{}", self.kind, self.in_channels, self.out_channels)
            }
            _ => write!(
                f,
                "{:?} {kh}x{kw}/{}/{} {}->{}",
                self.kind, self.stride, self.padding, self.in_channels, self.out_channels
            ),
        }
    }
}

/// Forward result of one row: `pre` is the value before the row's
/// activation (after batch norm when present), `out` after it.
#[derive(Clone, Copy, Debug)]
pub struct RowOutput {
    pub pre: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub output: Var,
    pub rows: Vec<RowOutput>,
}

/// A named sequence of layers whose parameters live in a [`ParamStore`]
/// under `"{prefix}.{row}.…"`.
#[derive(Clone, Debug)]
pub struct Chain {
    prefix: String,
    specs: Vec<LayerSpec>,
    external_filters: bool,
}

impl Chain {
    pub fn new(prefix: impl Into<String>, specs: Vec<LayerSpec>) -> Self {
        Self {
            prefix: prefix.into(),
            specs,
            external_filters: false,
        }
    }

    /// Convolution rows take their filters from the caller (see
    /// [`Chain::apply_post`]) instead of owning weights.
    pub fn with_external_filters(mut self) -> Self {
        self.external_filters = true;
        self
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    fn name(&self, row: usize, leaf: &str) -> String {
        format!("{}.{row}.{leaf}", self.prefix)
    }

    pub fn bn_prefix(&self, row: usize) -> String {
        self.name(row, "bn")
    }

    /// Per-row output shapes (without the batch axis) for a sample of shape
    /// `input`. The error names the first inconsistent row.
    pub fn output_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.specs.len());
        let mut cur = input.to_vec();
        for (row, spec) in self.specs.iter().enumerate() {
            cur = spec
                .output_shape(&cur)
                .map_err(|e| Error::Shape(format!("{} row {row} ({spec}): {e}", self.prefix)))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Create parameters and buffers for every row.
    pub fn register(&self, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        for (row, spec) in self.specs.iter().enumerate() {
            let (kh, kw) = spec.kernel;
            if spec.kind.is_conv() {
                if !self.external_filters {
                    let shape = [spec.out_channels, spec.in_channels, kh, kw];
                    store.add_param(self.name(row, "weight"), init_kaiming(&shape, rng.next_u64()))?;
                    if !spec.kind.has_bn() {
                        store.add_param(self.name(row, "bias"), Tensor::zeros(&[spec.out_channels]))?;
                    }
                }
                if spec.kind.has_bn() {
                    let c = spec.out_channels;
                    let bn = self.bn_prefix(row);
                    store.add_param(format!("{bn}.gamma"), Tensor::ones(&[c]))?;
                    store.add_param(format!("{bn}.beta"), Tensor::zeros(&[c]))?;
                    store.add_buffer(format!("{bn}.running_mean"), Tensor::zeros(&[c]))?;
                    store.add_buffer(format!("{bn}.running_var"), Tensor::ones(&[c]))?;
                }
            } else if spec.kind.is_linear() {
                let shape = [spec.in_channels, spec.out_channels];
                store.add_param(self.name(row, "weight"), init_kaiming(&shape, rng.next_u64()))?;
                store.add_param(self.name(row, "bias"), Tensor::zeros(&[spec.out_channels]))?;
            }
        }
        Ok(())
    }

    /// Batch norm (if any) and activation of a convolution row, applied to
    /// an already convolved `conv_out`.
    pub fn apply_post(&self, s: &mut Session, row: usize, conv_out: Var) -> Result<RowOutput> {
        let spec = &self.specs[row];
        let pre = if spec.kind.has_bn() {
            let bn = self.bn_prefix(row);
            let gamma = s.param(&format!("{bn}.gamma"))?;
            let beta = s.param(&format!("{bn}.beta"))?;
            match s.mode() {
                Mode::Train => {
                    let (y, stats) = s.tape.batchnorm2d(conv_out, gamma, beta, BnMode::Train, BN_EPS)?;
                    if let Some(stats) = stats {
                        s.record_stats(bn, stats);
                    }
                    y
                }
                Mode::Eval => {
                    let running = s.store().running_stats(&bn)?;
                    let mode = BnMode::Eval {
                        mean: &running.mean,
                        var: &running.var,
                    };
                    s.tape.batchnorm2d(conv_out, gamma, beta, mode, BN_EPS)?.0
                }
            }
        } else {
            conv_out
        };
        let out = match spec.kind {
            LayerKind::ConvReLU | LayerKind::ConvBNReLU => s.tape.relu(pre)?,
            LayerKind::ConvBNLReLU => s.tape.leaky_relu(pre, spec.slope)?,
            _ => pre,
        };
        Ok(RowOutput { pre, out })
    }

    /// Run a single row. Convolution rows of a chain with external filters
    /// must go through [`Chain::apply_post`] instead.
    pub fn forward_row(&self, s: &mut Session, row: usize, x: Var) -> Result<RowOutput> {
        let spec = &self.specs[row];
        let same = |v| RowOutput { pre: v, out: v };
        match spec.kind {
            k if k.is_conv() => {
                if self.external_filters {
                    return Err(Error::InvalidArgument(format!(
                        "{} row {row} expects externally generated filters",
                        self.prefix
                    )));
                }
                let w = s.param(&self.name(row, "weight"))?;
                let b = if k.has_bn() {
                    None
                } else {
                    Some(s.param(&self.name(row, "bias"))?)
                };
                let y = s.tape.conv2d(x, w, b, spec.stride, spec.padding)?;
                self.apply_post(s, row, y)
            }
            LayerKind::MaxPool => Ok(same(s.tape.maxpool2d(x, spec.kernel.0, spec.stride)?)),
            LayerKind::AvgPool => Ok(same(s.tape.avgpool2d(x, spec.kernel.0, spec.stride)?)),
            LayerKind::Upsample => Ok(same(s.tape.upsample_nearest(x, spec.stride)?)),
            _ => {
                let x = if s.tape.shape(x).len() != 2 { s.tape.flatten(x)? } else { x };
                let w = s.param(&self.name(row, "weight"))?;
                let b = s.param(&self.name(row, "bias"))?;
                let pre = s.tape.linear(x, w, b)?;
                let out = if spec.kind == LayerKind::LinearLReLU {
                    s.tape.leaky_relu(pre, spec.slope)?
                } else {
                    pre
                };
                Ok(RowOutput { pre, out })
            }
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ChainOutput> {
        let mut rows = Vec::with_capacity(self.specs.len());
        let mut cur = x;
        for row in 0..self.specs.len() {
            let r = self.forward_row(s, row, cur)?;
            cur = r.out;
            rows.push(r);
        }
        Ok(ChainOutput { output: cur, rows })
    }

    /// One line per row, for architecture manifests.
    pub fn manifest(&self) -> String {
        let mut out = format!("[{}]\n", self.prefix);
        for (row, spec) in self.specs.iter().enumerate() {
            out.push_str(&format!("{row}: {spec}\n"));
        }
        out
    }
}

/// Validate `specs` against a per-sample `input_shape` and register fresh
/// parameters seeded from `seed`.
pub fn build_chain(prefix: &str, specs: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<(Chain, ParamStore)> {
    use rand::SeedableRng;
    let chain = Chain::new(prefix, specs);
    chain.output_shapes(input_shape)?;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    chain.register(&mut store, &mut rng)?;
    Ok((chain, store))
}
