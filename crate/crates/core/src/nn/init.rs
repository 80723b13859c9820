//! Parameter initialisers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fan-in of a weight tensor: `Cin*kh*kw` for `[Cout,Cin,kh,kw]` filters,
/// `F` for `[F,G]` linear weights, the length for vectors.
pub fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 1,
        1 => shape[0],
        2 => shape[0],
        _ => shape[1..].iter().product(),
    }
}

/// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`, i.e. variance
/// `2 / fan_in`.
pub fn init_kaiming(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / fan_in(shape) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `rows x cols` matrix with orthonormal rows, from a seeded standard-normal
/// matrix orthonormalised by Gram-Schmidt (applied twice for stability).
/// This is the Q factor of the QR decomposition with a positive diagonal in R.
pub fn init_orthogonal(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("init_orthogonal: empty matrix".into()));
    }
    if rows > cols {
        return Err(Error::InvalidArgument(format!(
            "init_orthogonal: cannot fit {rows} orthonormal rows in dimension {cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..rows {
        let (done, rest) = m.split_at_mut(i * cols);
        let row = &mut rest[..cols];
        for _ in 0..2 {
            for q in done.chunks(cols) {
                let d: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidArgument("init_orthogonal: degenerate random draw".into()));
        }
        row.iter_mut().for_each(|a| *a /= norm);
    }
    Ok(Tensor::from_parts(vec![rows, cols], m))
}
