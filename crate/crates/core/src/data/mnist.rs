//! The IDX format: big-endian magic, big-endian u32 extents, raw bytes.
//! Gzip-compressed files are recognised by their header and inflated.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::MultiGzDecoder;

use super::{find_file, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::DatasetKind;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const SIDE: usize = 28;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], what: &str, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let need = 4 * (1 + ndims);
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: what.into(),
            expected: need,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(bytes);
    if found != magic {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: what.into(),
            expected: need,
            found: bytes.len(),
        });
    }
    Ok((0..ndims).map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..]) as usize).collect())
}

fn payload<'a>(bytes: &'a [u8], what: &str, offset: usize, len: usize) -> Result<&'a [u8]> {
    let expected = offset + len;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: what.into(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::DimMismatch {
            what: what.into(),
            detail: format!("{} bytes after the declared data", bytes.len() - expected),
        });
    }
    Ok(&bytes[offset..])
}

/// Image bytes of an IDX image file, in file order.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let dims = header(bytes, what, IMAGE_MAGIC, 3)?;
    if dims[1] != SIDE || dims[2] != SIDE {
        return Err(Error::DimMismatch {
            what: what.into(),
            detail: format!("images are {}x{}, expected {SIDE}x{SIDE}", dims[1], dims[2]),
        });
    }
    Ok(payload(bytes, what, 16, dims[0] * SIDE * SIDE)?.to_vec())
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let dims = header(bytes, what, LABEL_MAGIC, 1)?;
    Ok(payload(bytes, what, 8, dims[0])?.to_vec())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, &labels_path.display().to_string())?;
    if images.len() != labels.len() * SIDE * SIDE {
        return Err(Error::DimMismatch {
            what: format!("{} / {}", images_path.display(), labels_path.display()),
            detail: format!("{} images but {} labels", images.len() / (SIDE * SIDE), labels.len()),
        });
    }
    Dataset::new(DatasetKind::Mnist, split, images, labels)
}

/// Look for the canonical file names (optionally `.gz`) in `dir`,
/// `dir/mnist` or `dir/MNIST/raw`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let names = |kind: &str, n: usize| {
        [
            format!("{stem}-{kind}-idx{n}-ubyte"),
            format!("{stem}-{kind}-idx{n}-ubyte.gz"),
            format!("{stem}-{kind}.idx{n}-ubyte"),
        ]
    };
    let subdirs = ["", "mnist", "MNIST/raw"];
    let images = find_file(dir, &subdirs, &names("images", 3))?;
    let labels = find_file(dir, &subdirs, &names("labels", 1))?;
    load_mnist_idx(&images, &labels, split)
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let mut out = vec![0u8; 16];
    BigEndian::write_u32_into(&[IMAGE_MAGIC, ds.len() as u32, SIDE as u32, SIDE as u32], &mut out);
    out.extend_from_slice(ds.pixels());
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32_into(&[LABEL_MAGIC, ds.len() as u32], &mut out);
    out.extend_from_slice(ds.labels());
    out
}

/// Uncompressed IDX files.
pub fn write_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.kind() != DatasetKind::Mnist {
        return Err(Error::InvalidArgument("IDX output is for MNIST only".into()));
    }
    fs::write(images_path, encode_idx_images(ds))?;
    fs::write(labels_path, encode_idx_labels(ds))?;
    Ok(())
}
