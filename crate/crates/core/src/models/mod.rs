//! Complete networks: autoencoder, reducers, prediction network, and the
//! model that wires them together in either baseline or filter-generation
//! mode.

pub mod arch;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::filtergen::{DynConvLayer, FilterShape};
use crate::nn::{Chain, ParamStore, Session};
use crate::tensor::Tensor;

pub use loss::{bce_reconstruction_loss, nll_classification_loss, total_loss, LossBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    /// `[C, H, W]` of one image.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::InvalidArgument(format!("unknown dataset `{s}` (expected mnist or cifar10)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelMode {
    Baseline,
    FilterGeneration,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Baseline => "baseline",
            ModelMode::FilterGeneration => "fg",
        })
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelMode::Baseline),
            "fg" => Ok(ModelMode::FilterGeneration),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected baseline or fg)"))),
        }
    }
}

/// What determines a model's architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dataset: DatasetKind,
    pub mode: ModelMode,
    /// Encoder width and feature length on MNIST; CIFAR-10 widths are fixed.
    pub n_enc: usize,
    /// Base filters per repository. `None` means one per generated filter,
    /// capped at the filter length.
    pub repo_size: Option<usize>,
}

impl ModelConfig {
    pub fn new(dataset: DatasetKind, mode: ModelMode) -> Self {
        Self {
            dataset,
            mode,
            n_enc: 20,
            repo_size: None,
        }
    }
}

/// Everything one forward pass produces. The per-layer vectors are empty in
/// baseline mode.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Decoder output after the logistic function.
    pub reconstruction: Option<Var>,
    pub taps: Vec<Var>,
    pub features: Vec<Var>,
    pub coefficients: Vec<Var>,
    pub filters: Vec<Var>,
    /// Activated outputs of the dynamic layers.
    pub featmaps: Vec<Var>,
}

#[derive(Clone, Debug)]
struct FgParts {
    encoder: Chain,
    decoder: Chain,
    taps: Vec<usize>,
    reducers: Vec<Chain>,
    dyn_layers: Vec<DynConvLayer>,
}

/// A prediction network, plus in filter-generation mode the autoencoder,
/// reducers and dynamic layers that supply its convolution filters.
#[derive(Clone, Debug)]
pub struct DynModel {
    config: ModelConfig,
    prediction: Chain,
    fg: Option<FgParts>,
}

impl DynModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.n_enc == 0 {
            return Err(Error::InvalidArgument("n_enc must be positive".into()));
        }
        let specs = match config.dataset {
            DatasetKind::Mnist => arch::mnist_baseline(),
            DatasetKind::Cifar10 => arch::cifar_baseline(),
        };
        let mut prediction = Chain::new("pred", specs);
        let fg = match config.mode {
            ModelMode::Baseline => None,
            ModelMode::FilterGeneration => {
                prediction = prediction.with_external_filters();
                Some(Self::fg_parts(&config, &prediction)?)
            }
        };
        let model = Self { config, prediction, fg };
        model.shape_audit()?;
        Ok(model)
    }

    fn fg_parts(config: &ModelConfig, prediction: &Chain) -> Result<FgParts> {
        let (encoder, decoder, reducers, lens) = match config.dataset {
            DatasetKind::Mnist => {
                let n = config.n_enc;
                let reducers = (0..2).map(|t| arch::mnist_reducer(t, n)).collect::<Vec<_>>();
                (arch::mnist_encoder(n), arch::mnist_decoder(n), reducers, vec![n, n])
            }
            DatasetKind::Cifar10 => {
                let reducers = (0..4).map(arch::cifar_reducer).collect::<Vec<_>>();
                (
                    arch::cifar_encoder(),
                    arch::cifar_decoder(),
                    reducers,
                    arch::CIFAR_FEATURE_LENS.to_vec(),
                )
            }
        };
        let conv_rows: Vec<usize> = (0..prediction.len()).filter(|&r| prediction.specs()[r].kind.is_conv()).collect();
        let mut dyn_layers = Vec::new();
        for (k, &row) in conv_rows.iter().enumerate() {
            let spec = &prediction.specs()[row];
            let target = FilterShape {
                count: spec.out_channels,
                in_channels: spec.in_channels,
                kernel_h: spec.kernel.0,
                kernel_w: spec.kernel.1,
            };
            let m = config.repo_size.unwrap_or_else(|| target.count.min(target.patch_len()));
            dyn_layers.push(DynConvLayer::new(
                format!("dyn.{k}"),
                target,
                m,
                lens[k],
                spec.stride,
                spec.padding,
            )?);
        }
        Ok(FgParts {
            encoder: Chain::new("enc", encoder),
            decoder: Chain::new("dec", decoder),
            taps: (0..lens.len()).collect(),
            reducers: reducers
                .into_iter()
                .enumerate()
                .map(|(t, specs)| Chain::new(format!("red.{t}"), specs))
                .collect(),
            dyn_layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn prediction(&self) -> &Chain {
        &self.prediction
    }

    pub fn dyn_layers(&self) -> &[DynConvLayer] {
        self.fg.as_ref().map_or(&[], |fg| &fg.dyn_layers)
    }

    /// All chains in registration order.
    pub fn chains(&self) -> Vec<&Chain> {
        let mut out = Vec::new();
        if let Some(fg) = &self.fg {
            out.push(&fg.encoder);
            out.push(&fg.decoder);
            out.extend(fg.reducers.iter());
        }
        out.push(&self.prediction);
        out
    }

    /// Per-chain, per-row output shapes for one sample; fails if any chain
    /// is inconsistent with its input, if the decoder does not return an
    /// image, or if a reducer does not end at its layer's feature length.
    pub fn shape_audit(&self) -> Result<Vec<(String, Vec<Vec<usize>>)>> {
        let image = self.config.dataset.image_shape();
        let mut out = Vec::new();
        let pred = self.prediction.output_shapes(&image)?;
        if pred.last().map(Vec::as_slice) != Some(&[self.config.dataset.num_classes()][..]) {
            return Err(Error::Shape("prediction network must end in 10 logits".into()));
        }
        if let Some(fg) = &self.fg {
            let enc = fg.encoder.output_shapes(&image)?;
            let dec = fg.decoder.output_shapes(enc.last().unwrap())?;
            if dec.last().unwrap().as_slice() != image {
                return Err(Error::Shape(format!(
                    "decoder produces {:?}, expected {image:?}",
                    dec.last().unwrap()
                )));
            }
            out.push((fg.encoder.prefix().to_string(), enc.clone()));
            out.push((fg.decoder.prefix().to_string(), dec));
            for ((red, &tap), layer) in fg.reducers.iter().zip(&fg.taps).zip(&fg.dyn_layers) {
                let shapes = red.output_shapes(&enc[tap])?;
                let last = shapes.last().unwrap();
                if last.as_slice() != [layer.coeff_map().feature_len()] {
                    return Err(Error::Shape(format!(
                        "{} ends in {last:?}, {} expects [{}]",
                        red.prefix(),
                        layer.name(),
                        layer.coeff_map().feature_len()
                    )));
                }
                out.push((red.prefix().to_string(), shapes));
            }
        }
        out.push((self.prediction.prefix().to_string(), pred));
        Ok(out)
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for chain in self.chains() {
            chain.register(&mut store, &mut rng)?;
        }
        for layer in self.dyn_layers() {
            layer.register(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Human-readable architecture description.
    pub fn manifest(&self) -> String {
        let mut out = format!(
            "dataset={}\nmode={}\nn_enc={}\n",
            self.config.dataset, self.config.mode, self.config.n_enc
        );
        for chain in self.chains() {
            out.push_str(&chain.manifest());
        }
        for layer in self.dyn_layers() {
            let t = layer.repository().target();
            let (dynamic, direct) = layer.parameter_count();
            out.push_str(&format!(
                "[{}] filters={}x{}x{}x{} repository={} features={} stride={} padding={} map_weights={dynamic} direct_weights={direct}\n",
                layer.name(),
                t.count,
                t.in_channels,
                t.kernel_h,
                t.kernel_w,
                layer.repository().size(),
                layer.coeff_map().feature_len(),
                layer.stride(),
                layer.padding(),
            ));
        }
        out
    }

    pub fn forward(&self, s: &mut Session, images: &Tensor) -> Result<ModelOutput> {
        match self.config.mode {
            ModelMode::Baseline => Ok(ModelOutput {
                logits: self.forward_baseline(s, images)?,
                reconstruction: None,
                taps: vec![],
                features: vec![],
                coefficients: vec![],
                filters: vec![],
                featmaps: vec![],
            }),
            ModelMode::FilterGeneration => self.forward_fg(s, images, images),
        }
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let want = self.config.dataset.image_shape();
        if images.ndim() != 4 || images.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                images.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_baseline(&self, s: &mut Session, images: &Tensor) -> Result<Var> {
        if self.fg.is_some() {
            return Err(Error::InvalidArgument("model is in filter-generation mode".into()));
        }
        self.check_images(images)?;
        let x = s.input(images.clone());
        Ok(self.prediction.forward(s, x)?.output)
    }

    /// Classify `images` with filters generated from `feature_images`
    /// (normally the same batch; a permutation of it for the swap probe).
    pub fn forward_fg(&self, s: &mut Session, images: &Tensor, feature_images: &Tensor) -> Result<ModelOutput> {
        let fg = self
            .fg
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model is in baseline mode".into()))?;
        self.check_images(images)?;
        if images.shape() != feature_images.shape() {
            return Err(Error::Shape(format!(
                "feature images {:?} do not match images {:?}",
                feature_images.shape(),
                images.shape()
            )));
        }
        let fx = s.input(feature_images.clone());
        let enc = fg.encoder.forward(s, fx)?;
        let dec = fg.decoder.forward(s, enc.output)?;
        let reconstruction = s.tape.sigmoid(dec.output)?;
        let taps: Vec<Var> = fg.taps.iter().map(|&t| enc.rows[t].pre).collect();
        let mut features = Vec::with_capacity(taps.len());
        for (red, &tap) in fg.reducers.iter().zip(&taps) {
            features.push(red.forward(s, tap)?.output);
        }

        let (mut coefficients, mut filters, mut featmaps) = (vec![], vec![], vec![]);
        let mut cur = s.input(images.clone());
        let mut k = 0;
        for row in 0..self.prediction.len() {
            if self.prediction.specs()[row].kind.is_conv() {
                let out = fg.dyn_layers[k].forward(s, cur, features[k])?;
                let r = self.prediction.apply_post(s, row, out.output)?;
                coefficients.push(out.coefficients);
                filters.push(out.filters);
                featmaps.push(r.out);
                cur = r.out;
                k += 1;
            } else {
                cur = self.prediction.forward_row(s, row, cur)?.out;
            }
        }
        Ok(ModelOutput {
            logits: cur,
            reconstruction: Some(reconstruction),
            taps,
            features,
            coefficients,
            filters,
            featmaps,
        })
    }

    /// Forward, then the joint loss against `images` and `labels`.
    pub fn loss(&self, s: &mut Session, out: &ModelOutput, images: &Tensor, labels: &[usize], rec_weight: f64) -> Result<LossBundle> {
        let rec = match out.reconstruction {
            Some(r) => Some(bce_reconstruction_loss(s.tape, r, images)?),
            None => None,
        };
        total_loss(s.tape, rec, out.logits, labels, rec_weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::Mode;

    fn images(shape: [usize; 3], b: usize, seed: u64) -> Tensor {
        let n = b * shape.iter().product::<usize>();
        let data = (0..n)
            .map(|i| (((i as u64 + 3) * 2654435761 + seed) % 997) as f64 / 996.0)
            .collect();
        Tensor::new(&[b, shape[0], shape[1], shape[2]], data).unwrap()
    }

    fn fg(dataset: DatasetKind) -> ModelConfig {
        ModelConfig::new(dataset, ModelMode::FilterGeneration)
    }

    #[test]
    fn mnist_fg_output_shapes() {
        let model = DynModel::new(fg(DatasetKind::Mnist)).unwrap();
        let store = model.init(1).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Train);
        let x = images([1, 28, 28], 2, 0);
        let out = model.forward(&mut s, &x).unwrap();
        assert_eq!(s.tape.shape(out.reconstruction.unwrap()), &[2, 1, 28, 28]);
        assert_eq!(s.tape.shape(out.logits), &[2, 10]);
        let lens: Vec<_> = out.features.iter().map(|&f| s.tape.shape(f).to_vec()).collect();
        assert_eq!(lens, vec![vec![2, 20], vec![2, 20]]);
        assert_eq!(s.tape.shape(out.filters[1]), &[2, 5, 5, 5, 5]);
        assert_eq!(s.tape.shape(out.coefficients[0]), &[2, 5, 5]);
    }

    #[test]
    fn cifar_fg_output_shapes() {
        let model = DynModel::new(fg(DatasetKind::Cifar10)).unwrap();
        let sizes: Vec<_> = model.dyn_layers().iter().map(|l| l.repository().size()).collect();
        assert_eq!(sizes, vec![27, 128, 256, 256]);
        let store = model.init(2).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Train);
        let x = images([3, 32, 32], 2, 1);
        let out = model.forward(&mut s, &x).unwrap();
        assert_eq!(s.tape.shape(out.reconstruction.unwrap()), &[2, 3, 32, 32]);
        assert_eq!(s.tape.shape(out.logits), &[2, 10]);
        let lens: Vec<_> = out.features.iter().map(|&f| s.tape.shape(f)[1]).collect();
        assert_eq!(lens, vec![64, 96, 128, 128]);
    }

    #[test]
    fn baseline_logits() {
        for dataset in [DatasetKind::Mnist, DatasetKind::Cifar10] {
            let model = DynModel::new(ModelConfig::new(dataset, ModelMode::Baseline)).unwrap();
            let store = model.init(3).unwrap();
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store, Mode::Eval);
            let zero = Tensor::zeros(&[1, dataset.image_shape()[0], dataset.image_shape()[1], dataset.image_shape()[2]]);
            let logits = model.forward_baseline(&mut s, &zero).unwrap();
            assert_eq!(s.tape.shape(logits), &[1, 10]);
            assert!(s.tape.value(logits).is_finite());
            assert!(model.forward_fg(&mut s, &zero, &zero).is_err());
        }
    }

    #[test]
    fn both_modes_share_prediction_geometry() {
        for dataset in [DatasetKind::Mnist, DatasetKind::Cifar10] {
            let a = DynModel::new(ModelConfig::new(dataset, ModelMode::Baseline)).unwrap();
            let b = DynModel::new(fg(dataset)).unwrap();
            let img = dataset.image_shape();
            assert_eq!(
                a.prediction().output_shapes(&img).unwrap(),
                b.prediction().output_shapes(&img).unwrap()
            );
        }
    }

    #[test]
    fn duplicated_images_give_identical_rows_in_eval() {
        let model = DynModel::new(fg(DatasetKind::Mnist)).unwrap();
        let store = model.init(4).unwrap();
        let one = images([1, 28, 28], 1, 5);
        let x = Tensor::stack_batch(&[one.clone(), one]).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let out = model.forward(&mut s, &x).unwrap();
        for v in [out.logits, out.reconstruction.unwrap(), out.filters[0], out.features[1]] {
            let d = s.tape.value(v).data();
            let half = d.len() / 2;
            assert_eq!(&d[..half], &d[half..]);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = fg(DatasetKind::Mnist);
        cfg.repo_size = Some(26);
        assert!(DynModel::new(cfg).is_err());
        cfg.repo_size = Some(0);
        assert!(DynModel::new(cfg).is_err());
        cfg.repo_size = None;
        cfg.n_enc = 0;
        assert!(DynModel::new(cfg).is_err());
        assert!("svhn".parse::<DatasetKind>().is_err());
        assert_eq!("fg".parse::<ModelMode>().unwrap(), ModelMode::FilterGeneration);
    }

    #[test]
    fn manifest_lists_every_chain() {
        let model = DynModel::new(fg(DatasetKind::Mnist)).unwrap();
        let m = model.manifest();
        for name in ["[enc]", "[dec]", "[red.0]", "[red.1]", "[pred]", "[dyn.1]"] {
            assert!(m.contains(name), "{name} missing");
        }
        assert!(m.contains("map_weights=500 direct_weights=12500"));
    }
}
