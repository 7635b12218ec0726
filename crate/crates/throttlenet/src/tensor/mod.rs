//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a contiguous row-major buffer plus a shape. Operations are
//! recorded on a [`Graph`] (a tape of nodes in topological order); calling
//! [`Graph::backward`] on a scalar node returns exact gradients for every
//! tensor that requires them. The operation set is the minimum needed for
//! small CNNs/MLPs and the gating math: no broadcasting except scalar
//! multiplication, no implicit shape alignment.

mod graph;
mod kernels;

pub mod gradcheck;

pub use graph::{Gradients, Graph, NodeId};

/// Numerically stable scalar sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    graph::sigmoid(x)
}

use std::fmt;

/// The kinds of operation a graph node can record.
///
/// Every kind has a forward rule and an exact backward rule; all of them are
/// covered by the finite-difference suite in [`gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv2d,
    Add,
    ScalarMul,
    ElemMul,
    Relu,
    Sigmoid,
    Log,
    Reciprocal,
    Concat,
    SumComponents,
    GlobalMeanPool,
    MaxPool2,
    AvgPool2,
    Flatten,
    SoftmaxCrossEntropy,
    BatchMean,
}

impl OpKind {
    /// All operation kinds, in a fixed reporting order.
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::ScalarMul,
        OpKind::ElemMul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Reciprocal,
        OpKind::Concat,
        OpKind::SumComponents,
        OpKind::GlobalMeanPool,
        OpKind::MaxPool2,
        OpKind::AvgPool2,
        OpKind::Flatten,
        OpKind::SoftmaxCrossEntropy,
        OpKind::BatchMean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::ElemMul => "elementwise-mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Reciprocal => "reciprocal",
            OpKind::Concat => "concat",
            OpKind::SumComponents => "sum-over-components",
            OpKind::GlobalMeanPool => "global-mean-pool",
            OpKind::MaxPool2 => "max-pool2",
            OpKind::AvgPool2 => "avg-pool2",
            OpKind::Flatten => "flatten",
            OpKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
            OpKind::BatchMean => "batch-mean",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Errors from tensor construction and graph operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape extents.
    ShapeData { shape: Vec<usize>, len: usize },
    /// Two inputs to a binary/n-ary op have incompatible shapes.
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single input has a shape the op cannot accept.
    BadShape {
        op: OpKind,
        shape: Vec<usize>,
        expected: &'static str,
    },
    /// backward() was called on a node that is not scalar-shaped.
    NonScalarLoss { shape: Vec<usize> },
    /// backward() was called twice on the same graph.
    BackwardRerun,
    /// An n-ary op received an empty input list.
    EmptyInputs { op: OpKind },
    /// Concat axis exceeds the input rank.
    AxisOutOfRange { op: OpKind, axis: usize, rank: usize },
    /// A class label is outside [0, classes).
    LabelOutOfRange { label: usize, classes: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeData { shape, len } => write!(
                f,
                "data length {len} does not match shape {shape:?} (numel {})",
                shape.iter().product::<usize>()
            ),
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::BadShape { op, shape, expected } => {
                write!(f, "{op}: input shape {shape:?} invalid, expected {expected}")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss node, got shape {shape:?}")
            }
            TensorError::BackwardRerun => {
                write!(f, "backward already ran once on this graph")
            }
            TensorError::EmptyInputs { op } => write!(f, "{op}: empty input list"),
            TensorError::AxisOutOfRange { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// A dense n-dimensional f64 value in row-major order.
///
/// The shape is fixed at construction; only the data buffer may be mutated
/// (by optimizers updating parameters in place).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeData { shape, len: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false }
    }

    /// Gaussian-initialized tensor, N(0, std^2).
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Marks this tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a scalar-shaped (numel == 1) tensor.
    ///
    /// Panics when the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.data.len() == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeData { .. }));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn opkind_names_unique() {
        let mut names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), OpKind::ALL.len());
    }
}
