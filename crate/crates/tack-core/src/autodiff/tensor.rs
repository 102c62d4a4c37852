//! Dense tensors of rank 0..=4, generic over f32 (training) / f64 (oracles).

use num_traits::{Float, NumCast};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node}: {msg}")]
    ShapeMismatch { node: usize, msg: String },
    #[error("backward requires a scalar loss node")]
    NonScalarLoss,
    #[error("numeric failure at node {node}: {msg}")]
    Numeric { node: usize, msg: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Element types the engine runs on. f64 for gradient checks and metric
/// oracles, f32 for training throughput.
pub trait Scalar: Float + NumCast + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 constant not representable")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Contiguous row-major tensor; the last axis is fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if shape.len() > 4 {
            return Err(AutodiffError::ShapeMismatch {
                node: usize::MAX,
                msg: format!("rank {} exceeds 4", shape.len()),
            });
        }
        if data.len() != numel {
            return Err(AutodiffError::ShapeMismatch {
                node: usize::MAX,
                msg: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| <U as NumCast>::from(v).expect("cast"))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
