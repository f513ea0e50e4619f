//! Dense N-dimensional tensors with contiguous storage.
//!
//! Network activations and kernels are stored channel-major: volumes are
//! `[C, D, H, W]`, convolution kernels `[C_out, C_in, kd, kh, kw]`. The
//! innermost axis (`W`) is contiguous so spatial kernels reduce to slice
//! arithmetic.

use crate::error::{EmmaError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that `data` fills `shape` exactly and
    /// every extent is at least 1.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(EmmaError::Dimension(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EmmaError::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Channel count of a `[C, ...]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents of a `[C, D, H, W]` tensor.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        if self.rank() != 4 {
            return Err(EmmaError::Dimension(format!(
                "expected a [C, D, H, W] tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok([self.shape[1], self.shape[2], self.shape[3]])
    }

    /// Number of elements per channel of a `[C, ...]` tensor.
    pub fn channel_volume(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Converts element type; `f64 -> f32` rounds to nearest.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

/// Row-major flat offset for coordinate `(c, z, y, x)` in a `[C, D, H, W]` tensor.
#[inline]
pub fn offset4(shape: &[usize], c: usize, z: usize, y: usize, x: usize) -> usize {
    ((c * shape[1] + z) * shape[2] + y) * shape[3] + x
}
