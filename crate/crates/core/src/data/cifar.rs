//! The CIFAR-10 binary format: records of one label byte followed by 3072
//! pixel bytes (R, G and B planes, each 32x32 row-major).

use std::fs;
use std::path::{Path, PathBuf};

use super::{find_file, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::DatasetKind;

const RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: u64 = (RECORD * CIFAR_RECORDS_PER_FILE) as u64;

/// `(pixels, labels)` of a whole number of records, in file order.
pub fn parse_cifar10_records(bytes: &[u8], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::DimMismatch {
            what: what.into(),
            detail: format!("{} bytes is not a multiple of the {RECORD}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * (RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Concatenate files that must each hold exactly `records_per_file`
/// records.
pub fn load_cifar10_files(paths: &[PathBuf], records_per_file: usize, split: Split) -> Result<Dataset> {
    let expected = (records_per_file * RECORD) as u64;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for path in paths {
        let meta = fs::metadata(path).map_err(|_| Error::MissingFile(path.clone()))?;
        if meta.len() != expected {
            return Err(Error::FileSize {
                what: path.display().to_string(),
                expected,
                found: meta.len(),
            });
        }
        let (p, l) = parse_cifar10_records(&fs::read(path)?, &path.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(DatasetKind::Cifar10, split, pixels, labels)
}

/// The five training files or the test file, from `dir` or
/// `dir/cifar-10-batches-bin`.
pub fn load_cifar10_bin(dir: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let paths = names
        .iter()
        .map(|n| find_file(dir, &["", "cifar-10-batches-bin"], std::slice::from_ref(n)))
        .collect::<Result<Vec<_>>>()?;
    load_cifar10_files(&paths, CIFAR_RECORDS_PER_FILE, split)
}

pub fn write_cifar10_bin(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.kind() != DatasetKind::Cifar10 {
        return Err(Error::InvalidArgument("CIFAR-10 output needs a CIFAR-10 dataset".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels()[i]);
        out.extend_from_slice(ds.image_bytes(i));
    }
    fs::write(path, out)?;
    Ok(())
}
