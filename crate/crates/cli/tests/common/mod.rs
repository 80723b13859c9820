#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use dynfilter::data::{write_mnist_idx, Dataset, Split};
use dynfilter::models::DatasetKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 28x28 images of noise with a bright 6x6 block whose position encodes
/// the label; labels cycle through the ten classes.
pub fn blocks(n: usize, split: Split, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let (by, bx) = (2 + (label / 5) * 12, 1 + (label % 5) * 5);
        for y in 0..28 {
            for x in 0..28 {
                let inside = (by..by + 6).contains(&y) && (bx..bx + 6).contains(&x);
                let base = if inside { 180 } else { 0 };
                pixels.push(base + rng.random_range(0..60u8));
            }
        }
        labels.push(label as u8);
    }
    Dataset::new(DatasetKind::Mnist, split, pixels, labels).unwrap()
}

/// Uniform noise images with balanced labels that carry no signal.
pub fn noise(n: usize, split: Split, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 784).map(|_| rng.random()).collect();
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    Dataset::new(DatasetKind::Mnist, split, pixels, labels).unwrap()
}

/// Write train and test splits of [`blocks`] in IDX form under `dir`.
pub fn write_mnist_fixture(dir: &Path, n_train: usize, n_test: usize) {
    write_fixture_with(dir, n_train, n_test, blocks);
}

pub fn write_fixture_with(dir: &Path, n_train: usize, n_test: usize, make: fn(usize, Split, u64) -> Dataset) {
    std::fs::create_dir_all(dir).unwrap();
    for (split, n, stem, seed) in [(Split::Train, n_train, "train", 1), (Split::Test, n_test, "t10k", 2)] {
        write_mnist_idx(
            &make(n, split, seed),
            &dir.join(format!("{stem}-images-idx3-ubyte")),
            &dir.join(format!("{stem}-labels-idx1-ubyte")),
        )
        .unwrap();
    }
}

pub fn dynfilter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynfilter"))
        .args(args)
        .output()
        .expect("spawn dynfilter")
}

/// Run and require success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let out = dynfilter(args);
    assert!(
        out.status.success(),
        "dynfilter {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Run and require failure, returning stderr.
pub fn fails(args: &[&str]) -> String {
    let out = dynfilter(args);
    assert!(!out.status.success(), "dynfilter {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// The `key=value` field of a one-line report.
pub fn field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in `{line}`"))
        .to_string()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
