//! Dense row-major f64 tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Errors raised by tensor construction and tape primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Input shapes violate a primitive's shape rule. Names the primitive and
    /// the offending dimensions.
    ShapeMismatch { op: &'static str, detail: String },
    /// An input tensor contains NaN or infinity.
    NonFiniteInput { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss,
    /// `product(shape)` does not match the data length.
    InvalidShape { expected: usize, got: usize },
    /// A row/embedding index is out of range.
    IndexOutOfRange { index: usize, len: usize },
}

impl core::fmt::Display for TensorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonFiniteInput { op } => write!(f, "non-finite input to {op}"),
            TensorError::NonScalarLoss => write!(f, "backward requires a scalar loss"),
            TensorError::InvalidShape { expected, got } => {
                write!(f, "shape implies {expected} elements, data has {got}")
            }
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor: a shape and a contiguous row-major f64 buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// All entries finite. NaN/Inf anywhere is an error state.
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFiniteInput { op: "validate" })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| crate::fmath::abs(a - b))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

pub(crate) fn dims_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}
