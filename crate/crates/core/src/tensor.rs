use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Result};

/// Dense row-major `f64` array.
///
/// The buffer is reference counted so that recording a tensor on a tape, or
/// handing a parameter to a forward pass, does not copy it. Mutation goes
/// through [`Tensor::data_mut`], which copies only when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} holds {n} elements but buffer has {}", data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Caller guarantees `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of the batch (leading) axis, `[start, start + count)`.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Result<Self> {
        let b = self.shape[0];
        if count == 0 || start + count > b {
            return shape_err(format!("batch slice {start}..{} out of range for extent {b}", start + count));
        }
        let per = self.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self::from_parts(shape, self.data[start * per..(start + count) * per].to_vec()))
    }

    /// Concatenate along the leading axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Self> {
        let first = match parts.first() {
            Some(t) => t,
            None => return shape_err("stack of zero tensors"),
        };
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err(format!("cannot stack {:?} with {:?}", p.shape, first.shape));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Ok(Self::from_parts(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", ... ({} more)", self.len() - SHOWN)?;
        }
        write!(f, "]")
    }
}
