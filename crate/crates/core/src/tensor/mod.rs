//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] records every primitive applied through it. Tensors that were
//! never recorded (plain values) act as constants. [`Tape::backward`]
//! consumes the tape: a second call fails with [`TensorError::TapeConsumed`].
//!
//! ```
//! use mghl_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
//! let x = Tensor::vector(vec![3.0, 4.0]);
//! let prod = tape.mul(&w, &x).unwrap();
//! let y = tape.sum(&prod).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt(&w).data(), &[3.0, 4.0]);
//! ```

mod grad_check;
pub mod kernels;
mod tape;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub use grad_check::gradient_check;
pub use tape::{Gradients, NodeId, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{primitive}: shape mismatch ({detail})")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("tensor belongs to a different tape")]
    ForeignTensor,
    #[error("non-finite value while perturbing coordinate {0}")]
    NonFinitePerturbation(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major `f64` array. Cloning is cheap: the buffer is shared.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// The value with its tape handle dropped.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors share the same buffer.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// A differentiable primitive together with its static attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Primitive {
    /// `[k]·[k,m] → [m]` or `[n,k]·[k,m] → [n,m]`.
    MatMul,
    /// Valid convolution; inputs `(image, weight, bias)`.
    Conv2d { stride: usize },
    /// Elementwise, with scalar or trailing-row broadcast of the second input.
    Add,
    /// Elementwise, with scalar broadcast of either input.
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    /// Along the last axis.
    Softmax,
    /// Natural log; inputs are clamped below at `f64::MIN_POSITIVE`.
    Log,
    Sum,
    Mean,
    Concat { axis: usize },
    /// Constant one-hot vector; takes no inputs.
    OneHot { index: usize, depth: usize },
    /// Half-open range `[start, end)` along `axis`; rank is kept.
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat { .. } => "concat",
            Primitive::OneHot { .. } => "one_hot",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
        }
    }
}

/// Parses attribute-free primitive names; attributed ones get defaults
/// (`conv2d` stride 1, `concat` axis 0).
impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "conv2d" => Primitive::Conv2d { stride: 1 },
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "softmax" => Primitive::Softmax,
            "log" => Primitive::Log,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "concat" => Primitive::Concat { axis: 0 },
            other => return Err(TensorError::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Output shape of a valid convolution, or `None` when the kernel does not fit.
pub fn conv_output_hw(h: usize, w: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return None;
    }
    Some(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}
