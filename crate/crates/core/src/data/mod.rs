//! Dataset ingestion and batching.
//!
//! Pixels stay as the raw bytes of the source files; they become `v / 255`
//! only when a batch tensor is built. No other normalisation or
//! augmentation happens anywhere.

mod cifar;
mod mnist;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::DatasetKind;
use crate::tensor::Tensor;

pub use cifar::{load_cifar10_bin, load_cifar10_files, parse_cifar10_records, write_cifar10_bin, CIFAR_FILE_BYTES, CIFAR_RECORDS_PER_FILE};
pub use mnist::{
    encode_idx_images, encode_idx_labels, load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, write_mnist_idx,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Images as raw bytes in `[N, C, H, W]` order, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = kind.image_shape().iter().product::<usize>();
        if pixels.len() != labels.len() * per {
            return Err(Error::DimMismatch {
                what: format!("{kind} {split} set"),
                detail: format!("{} pixel bytes for {} labels", pixels.len(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= kind.num_classes()) {
            return Err(Error::DimMismatch {
                what: format!("{kind} {split} labels"),
                detail: format!("label {bad} out of range"),
            });
        }
        Ok(Self {
            kind,
            split,
            pixels,
            labels,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.kind.image_shape().iter().product()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[indices.len(), C, H, W]` with every byte mapped to `v / 255`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.kind.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend(self.image_bytes(i).iter().map(|&v| v as f64 / 255.0));
        }
        Tensor::new(&[indices.len(), c, h, w], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// A new dataset made of the given samples, in the given order
    /// (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample {i} out of range")));
            }
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self::new(self.kind, self.split, pixels, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples of a `seed`-shuffled order, kept in their
    /// original relative order. Returns a copy when `n >= len`.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        self.select(&keep).expect("indices are in range")
    }

    /// Sample counts per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.kind.num_classes()];
        self.labels.iter().for_each(|&l| h[l as usize] += 1);
        h
    }
}

/// Load one split from the canonical files under `dir`.
pub fn load(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist_dir(dir, split),
        DatasetKind::Cifar10 => load_cifar10_bin(dir, split),
    }
}

/// First existing `dir/sub/name` over the candidate subdirectories and
/// names.
pub(crate) fn find_file(dir: &Path, subdirs: &[&str], names: &[String]) -> Result<PathBuf> {
    for sub in subdirs {
        for name in names {
            let p = dir.join(sub).join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::MissingFile(dir.join(&names[0])))
}

/// The visiting order of epoch `epoch`: a permutation of `0..n` that
/// depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Iterator over the batches of one pass; the last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.ds.images(&indices).expect("order holds valid indices");
        let labels = self.ds.labels_of(&indices);
        Some(Batch { indices, images, labels })
    }
}

fn make_batches(ds: &Dataset, batch_size: usize, order: Vec<usize>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

/// Shuffled batches for training epoch `epoch`.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    make_batches(ds, batch_size, epoch_order(ds.len(), seed, epoch))
}

/// Batches in record order, for evaluation and export.
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Result<Batches<'_>> {
    make_batches(ds, batch_size, (0..ds.len()).collect())
}
