//! Per-sample filter generation.
//!
//! A feature vector of length `L_f` goes through an affine map to `N x M`
//! coefficients; filter `i` of the sample is then `sum_j c[i][j] * b_j`, a
//! linear combination of the `M` base filters `b_j` (each a flattened filter
//! of length `L_k = Cin*kh*kw`) held in a trainable repository. The affine
//! map needs `L_f*N*M` weights instead of the `L_f*N*L_k` a direct map to
//! the filters would.

use rand::RngCore;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_kaiming, init_orthogonal, ParamStore, Session};
use crate::tensor::Tensor;

/// Shape of the filter bank generated for one layer: `count` filters of
/// `in_channels x kernel_h x kernel_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterShape {
    pub count: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl FilterShape {
    pub fn new(count: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            count,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
        }
    }

    /// `L_k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// `M` base filters stored as an `[M, L_k]` parameter.
#[derive(Clone, Debug)]
pub struct FilterRepository {
    param: String,
    size: usize,
    target: FilterShape,
}

impl FilterRepository {
    pub fn new(param: impl Into<String>, size: usize, target: FilterShape) -> Result<Self> {
        if size == 0 || size > target.patch_len() {
            return Err(Error::InvalidArgument(format!(
                "repository size {size} must be in 1..={} (the filter length)",
                target.patch_len()
            )));
        }
        Ok(Self {
            param: param.into(),
            size,
            target,
        })
    }

    pub fn param_name(&self) -> &str {
        &self.param
    }

    /// `M`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn target(&self) -> FilterShape {
        self.target
    }

    /// Orthonormal rows from `seed`.
    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        store.add_param(&self.param, init_orthogonal(self.size, self.target.patch_len(), seed)?)
    }

    pub fn combine(&self, s: &mut Session, coeffs: Var) -> Result<Var> {
        let base = s.param(&self.param)?;
        combine_filters(s.tape, base, coeffs, self.target)
    }
}

/// The affine map from a length-`L_f` feature vector to `N x M`
/// coefficients: weight `[L_f, N*M]`, bias `[N*M]`, no nonlinearity.
#[derive(Clone, Debug)]
pub struct CoefficientMap {
    prefix: String,
    feature_len: usize,
    count: usize,
    size: usize,
}

impl CoefficientMap {
    pub fn new(prefix: impl Into<String>, feature_len: usize, count: usize, size: usize) -> Self {
        Self {
            prefix: prefix.into(),
            feature_len,
            count,
            size,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    /// `L_f`.
    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn param_count(&self) -> usize {
        self.feature_len * self.count * self.size + self.count * self.size
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let width = self.count * self.size;
        store.add_param(self.weight_name(), init_kaiming(&[self.feature_len, width], seed))?;
        store.add_param(self.bias_name(), Tensor::zeros(&[width]))
    }

    pub fn compute(&self, s: &mut Session, features: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = s.param(&self.bias_name())?;
        compute_coefficients(s.tape, w, b, features, self.count, self.size)
    }
}

/// `features [B, L_f] · weight + bias`, reshaped to `[B, N, M]`.
pub fn compute_coefficients(tape: &mut Tape, weight: Var, bias: Var, features: Var, count: usize, size: usize) -> Result<Var> {
    let fs = tape.shape(features);
    if fs.len() != 2 || fs[1] != tape.shape(weight)[0] {
        return shape_err(format!(
            "coefficient map expects [B, {}] features, got {fs:?}",
            tape.shape(weight)[0]
        ));
    }
    if tape.shape(weight)[1] != count * size {
        return shape_err(format!("coefficient map width {} is not {count} x {size}", tape.shape(weight)[1]));
    }
    let b = fs[0];
    let flat = tape.linear(features, weight, bias)?;
    tape.reshape(flat, &[b, count, size])
}

/// `filters[b, i] = sum_j coeffs[b, i, j] * base[j]`, reshaped to
/// `[B, N, Cin, kh, kw]`. A single dense product, differentiable in both
/// the coefficients and the base filters.
pub fn combine_filters(tape: &mut Tape, base: Var, coeffs: Var, target: FilterShape) -> Result<Var> {
    let (bs, cs) = (tape.shape(base).to_vec(), tape.shape(coeffs).to_vec());
    if bs.len() != 2 || bs[1] != target.patch_len() {
        return shape_err(format!("repository must be [M, {}], got {bs:?}", target.patch_len()));
    }
    if cs.len() != 3 || cs[1] != target.count || cs[2] != bs[0] {
        return shape_err(format!(
            "coefficients {cs:?} do not match {} filters over {} base filters",
            target.count, bs[0]
        ));
    }
    let b = cs[0];
    let flat = tape.reshape(coeffs, &[b * target.count, bs[0]])?;
    let filters = tape.matmul(flat, base)?;
    tape.reshape(filters, &[b, target.count, target.in_channels, target.kernel_h, target.kernel_w])
}

/// Everything produced by one dynamic convolution.
#[derive(Clone, Copy, Debug)]
pub struct DynConvOutput {
    pub output: Var,
    /// `[B, N, M]`.
    pub coefficients: Var,
    /// `[B, N, Cin, kh, kw]`.
    pub filters: Var,
}

/// A convolution whose filters are generated per sample.
#[derive(Clone, Debug)]
pub struct DynConvLayer {
    name: String,
    repository: FilterRepository,
    coeff_map: CoefficientMap,
    stride: usize,
    padding: usize,
}

impl DynConvLayer {
    pub fn new(
        name: impl Into<String>,
        target: FilterShape,
        repo_size: usize,
        feature_len: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let name = name.into();
        let repository = FilterRepository::new(format!("{name}.repository"), repo_size, target)?;
        let coeff_map = CoefficientMap::new(format!("{name}.coeff"), feature_len, target.count, repo_size);
        Ok(Self {
            name,
            repository,
            coeff_map,
            stride,
            padding,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn repository(&self) -> &FilterRepository {
        &self.repository
    }

    pub fn coeff_map(&self) -> &CoefficientMap {
        &self.coeff_map
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        self.repository.register(store, rng.next_u64())?;
        self.coeff_map.register(store, rng.next_u64())?;
        store.add_param(self.bias_name(), Tensor::zeros(&[self.repository.target.count]))
    }

    /// `(L_f*N*M, L_f*N*L_k)`: weights of the coefficient map versus a
    /// direct feature-to-filter map, biases and repository excluded.
    pub fn parameter_count(&self) -> (usize, usize) {
        let t = self.repository.target;
        let lf = self.coeff_map.feature_len;
        (lf * t.count * self.repository.size, lf * t.count * t.patch_len())
    }

    pub fn forward(&self, s: &mut Session, input: Var, features: Var) -> Result<DynConvOutput> {
        let coefficients = self.coeff_map.compute(s, features)?;
        let filters = self.repository.combine(s, coefficients)?;
        let bias = s.param(&self.bias_name())?;
        let output = s.tape.conv2d_per_sample(input, filters, Some(bias), self.stride, self.padding)?;
        Ok(DynConvOutput {
            output,
            coefficients,
            filters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, GradcheckOptions};
    use crate::nn::Mode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).unwrap()
    }

    fn noise(seed: u64) -> impl Fn(usize) -> f64 {
        move |i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0
    }

    #[test]
    fn zero_map_gives_zero_coefficients() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[4, 6]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let f = tape.constant(t(&[2, 4], noise(1)));
        let c = compute_coefficients(&mut tape, w, b, f, 2, 3).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 3]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selector_weight_copies_features() {
        // N=2, M=2, L_f=4: feature j goes to coefficient slot j
        let mut w = vec![0.0; 16];
        (0..4).for_each(|j| w[j * 4 + j] = 1.0);
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(&[4, 4], w).unwrap());
        let b = tape.constant(Tensor::zeros(&[4]));
        let feats = t(&[1, 4], noise(2));
        let f = tape.constant(feats.clone());
        let c = compute_coefficients(&mut tape, w, b, f, 2, 2).unwrap();
        assert_eq!(tape.value(c).data(), feats.data());
    }

    #[test]
    fn coefficients_match_dense_product() {
        let (w, b, f) = (t(&[3, 10], noise(3)), t(&[10], noise(4)), t(&[2, 3], noise(5)));
        let mut tape = Tape::new();
        let (wv, bv, fv) = (tape.constant(w.clone()), tape.constant(b.clone()), tape.constant(f.clone()));
        let c = compute_coefficients(&mut tape, wv, bv, fv, 5, 2).unwrap();
        for s in 0..2 {
            for k in 0..10 {
                let want: f64 = b.data()[k] + (0..3).map(|i| f.data()[s * 3 + i] * w.data()[i * 10 + k]).sum::<f64>();
                assert!((tape.value(c).data()[s * 10 + k] - want).abs() < 1e-12);
            }
        }
        let bad = tape.constant(t(&[2, 4], noise(6)));
        assert!(compute_coefficients(&mut tape, wv, bv, bad, 5, 2).is_err());
    }

    #[test]
    fn one_hot_coefficients_recover_base_filters_exactly() {
        let target = FilterShape::new(3, 2, 3);
        let base = init_orthogonal(4, target.patch_len(), 7).unwrap();
        let mut coeffs = vec![0.0; 2 * 3 * 4];
        let picks = [[2, 0, 3], [1, 1, 0]];
        for b in 0..2 {
            for i in 0..3 {
                coeffs[(b * 3 + i) * 4 + picks[b][i]] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let bv = tape.constant(base.clone());
        let cv = tape.constant(Tensor::new(&[2, 3, 4], coeffs).unwrap());
        let f = combine_filters(&mut tape, bv, cv, target).unwrap();
        assert_eq!(tape.shape(f), &[2, 3, 2, 3, 3]);
        let lk = target.patch_len();
        for (b, row) in picks.iter().enumerate() {
            for (i, &j) in row.iter().enumerate() {
                let got = &tape.value(f).data()[(b * 3 + i) * lk..(b * 3 + i + 1) * lk];
                assert_eq!(got, &base.data()[j * lk..(j + 1) * lk]);
            }
        }
    }

    #[test]
    fn zero_and_mean_combinations() {
        let target = FilterShape::new(1, 1, 2);
        let base = Tensor::new(&[2, 4], vec![1., 2., 3., 4., 5., -6., 7., 0.]).unwrap();
        let mut tape = Tape::new();
        let bv = tape.constant(base);
        let zero = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let f0 = combine_filters(&mut tape, bv, zero, target).unwrap();
        assert!(tape.value(f0).data().iter().all(|&v| v == 0.0));
        let half = tape.constant(Tensor::full(&[1, 1, 2], 0.5));
        let fm = combine_filters(&mut tape, bv, half, target).unwrap();
        assert_eq!(tape.value(fm).data(), &[3.0, -2.0, 5.0, 2.0]);
        let wrong_m = tape.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(combine_filters(&mut tape, bv, wrong_m, target).is_err());
    }

    fn layer_store(layer: &DynConvLayer, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer.register(&mut store, &mut rng).unwrap();
        store
    }

    #[test]
    fn one_hot_dynconv_equals_plain_conv() {
        let target = FilterShape::new(1, 1, 3);
        let layer = DynConvLayer::new("dyn", target, 3, 2, 1, 0).unwrap();
        let mut store = layer_store(&layer, 1);
        // coefficient = feature[0] for slot 1; feature = [1, 0] selects base filter 1
        let mut w = vec![0.0; 2 * 3];
        w[1] = 1.0;
        store.param_mut("dyn.coeff.weight").unwrap().value = Tensor::new(&[2, 3], w).unwrap();
        let x = t(&[1, 1, 6, 6], noise(8));
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let xv = s.input(x.clone());
        let fv = s.input(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let out = layer.forward(&mut s, xv, fv).unwrap();
        let base = store.param("dyn.repository").unwrap();
        let chosen = s.input(Tensor::new(&[1, 1, 3, 3], base.data()[9..18].to_vec()).unwrap());
        let plain = s.tape.conv2d(xv, chosen, None, 1, 0).unwrap();
        assert_eq!(s.tape.value(out.output), s.tape.value(plain));
    }

    #[test]
    fn first_mnist_layer_geometry() {
        let layer = DynConvLayer::new("p0", FilterShape::new(5, 1, 5), 5, 20, 1, 0).unwrap();
        let store = layer_store(&layer, 2);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.input(Tensor::zeros(&[3, 1, 28, 28]));
        let f = s.input(t(&[3, 20], noise(9)));
        let out = layer.forward(&mut s, x, f).unwrap();
        assert_eq!(s.tape.shape(out.output), &[3, 5, 24, 24]);
        assert_eq!(s.tape.shape(out.coefficients), &[3, 5, 5]);
    }

    #[test]
    fn parameter_counts() {
        let second = DynConvLayer::new("p1", FilterShape::new(5, 5, 5), 5, 20, 1, 0).unwrap();
        assert_eq!(second.parameter_count(), (500, 12500));
        let full = DynConvLayer::new("f", FilterShape::new(3, 1, 2), 4, 7, 1, 0).unwrap();
        let (d, n) = full.parameter_count();
        assert_eq!(d, n);
        let single = DynConvLayer::new("s", FilterShape::new(3, 2, 3), 1, 7, 1, 0).unwrap();
        assert_eq!(single.parameter_count().0, 7 * 3);
        assert!(DynConvLayer::new("x", FilterShape::new(3, 1, 2), 5, 7, 1, 0).is_err());
        assert_eq!(second.coeff_map().param_count(), 20 * 25 + 25);
    }

    #[test]
    fn gradcheck_through_dynconv() {
        let layer = DynConvLayer::new("g", FilterShape::new(2, 1, 3), 3, 4, 1, 1).unwrap();
        let store = layer_store(&layer, 5);
        let x = t(&[1, 1, 8, 8], noise(11));
        let feats = t(&[1, 4], noise(12));
        let opts = GradcheckOptions::default();
        for name in ["g.repository", "g.coeff.weight", "g.coeff.bias", "g.bias"] {
            let p = store.param(name).unwrap().clone();
            let report = gradcheck(
                |tape, v| {
                    let mut s = Session::new(tape, &store, Mode::Eval).with_override(name, v);
                    let xv = s.input(x.clone());
                    let fv = s.input(feats.clone());
                    let out = layer.forward(&mut s, xv, fv)?;
                    let sq = s.tape.mul(out.output, out.output)?;
                    s.tape.sum(sq)
                },
                &p,
                &opts,
            )
            .unwrap();
            assert!(report.passed, "{name}: {report:?}");
        }
        let report = gradcheck(
            |tape, v| {
                let mut s = Session::new(tape, &store, Mode::Eval);
                let fv = s.input(feats.clone());
                let out = layer.forward(&mut s, v, fv)?;
                let sq = s.tape.mul(out.output, out.output)?;
                s.tape.sum(sq)
            },
            &x,
            &opts,
        )
        .unwrap();
        assert!(report.passed, "input: {report:?}");
    }

    #[test]
    fn rows_of_the_batch_do_not_interact() {
        let layer = DynConvLayer::new("i", FilterShape::new(2, 2, 3), 4, 3, 1, 1).unwrap();
        let store = layer_store(&layer, 3);
        let run = |x: &Tensor, f: &Tensor| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store, Mode::Eval);
            let (xv, fv) = (s.input(x.clone()), s.input(f.clone()));
            let out = layer.forward(&mut s, xv, fv).unwrap();
            s.tape.value(out.output).clone()
        };
        let x = t(&[3, 2, 5, 5], noise(13));
        let f = t(&[3, 3], noise(14));
        let base = run(&x, &f);
        let mut x2 = x.clone();
        let mut f2 = f.clone();
        x2.data_mut()[..50].iter_mut().for_each(|v| *v += 0.5);
        x2.data_mut()[100..].iter_mut().for_each(|v| *v -= 0.25);
        f2.data_mut()[0] = 9.0;
        f2.data_mut()[8] = -9.0;
        let moved = run(&x2, &f2);
        let per = base.len() / 3;
        assert_eq!(&base.data()[per..2 * per], &moved.data()[per..2 * per]);
        assert_ne!(&base.data()[..per], &moved.data()[..per]);
    }

    #[test]
    fn gradients_reach_repository_and_coefficient_map() {
        let layer = DynConvLayer::new("d", FilterShape::new(2, 1, 3), 2, 3, 1, 0).unwrap();
        let store = layer_store(&layer, 4);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Train);
        let x = s.input(t(&[2, 1, 5, 5], noise(15)));
        let f = s.input(t(&[2, 3], noise(16)));
        let out = layer.forward(&mut s, x, f).unwrap();
        let sq = s.tape.mul(out.output, out.output).unwrap();
        let loss = s.tape.sum(sq).unwrap();
        let bindings = s.finish();
        tape.backward(loss).unwrap();
        for (name, g) in bindings.gradients(&tape) {
            let g = g.unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    proptest! {
        #[test]
        fn combine_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let target = FilterShape::new(3, 2, 3);
            let base = init_orthogonal(4, target.patch_len(), seed).unwrap();
            let c1 = t(&[2, 3, 4], noise(seed));
            let c2 = t(&[2, 3, 4], noise(seed + 1));
            let mix = Tensor::new(&[2, 3, 4], c1.data().iter().zip(c2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let mut tape = Tape::new();
            let bv = tape.constant(base);
            let vars: Vec<Var> = [c1, c2, mix].into_iter().map(|c| tape.constant(c)).collect();
            let outs: Vec<Var> = vars.iter().map(|&c| combine_filters(&mut tape, bv, c, target).unwrap()).collect();
            let (f1, f2, fm) = (tape.value(outs[0]).data(), tape.value(outs[1]).data(), tape.value(outs[2]).data());
            let scale = fm.iter().map(|v| v.abs()).fold(1e-300, f64::max);
            for i in 0..fm.len() {
                let want = a * f1[i] + b * f2[i];
                prop_assert!((fm[i] - want).abs() / scale <= 1e-12, "{} vs {}", fm[i], want);
            }
        }
    }
}
