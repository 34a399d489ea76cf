//! Dense row-major tensors over `f64`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} scalars, data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite scalar at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape {shape:?} has no scalars")]
    EmptyShape { shape: Vec<usize> },
}

/// A dense tensor. Every constructor and transform validates that the scalar
/// count matches the shape and that all values are finite, so downstream code
/// can assume both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected == 0 {
            return Err(TensorError::EmptyShape { shape });
        }
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { data, shape })
    }

    /// All-zero tensor. Panics on an empty shape; callers pass literal shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "zero-extent shape {shape:?}");
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(value: f64, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Self::new(vec![value; n], shape.to_vec())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Element-wise transform; revalidates finiteness of the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        Tensor::new(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    /// Reinterpret the same scalars under a new shape of equal size.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(self.data.clone(), shape)
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Sign with the convention `sign(0) = 0`, used by gradient-sign steps.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
