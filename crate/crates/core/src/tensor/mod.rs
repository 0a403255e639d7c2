//! Dense row-major `f64` tensors and the forward kernels every layer is built from.
//!
//! A [`Tensor`] is an immutable value (cloning shares the buffer). Gradient
//! tracking lives in [`crate::autodiff`], which wraps these kernels.

pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

pub use kernels::Padding;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

/// The elementwise operations, unary and binary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Subtract,
    Hadamard,
    Scale(f64),
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Subtract | Elementwise::Hadamard)
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Subtract => "subtract",
            Elementwise::Hadamard => "hadamard",
            Elementwise::Scale(_) => "scale",
            Elementwise::Affine { .. } => "affine",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Tanh => "tanh",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Relu => "relu",
        }
    }

    pub(crate) fn apply_unary(self, x: f64) -> f64 {
        match self {
            Elementwise::Scale(c) => c * x,
            Elementwise::Affine { scale, shift } => scale * x + shift,
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Tanh => x.tanh(),
            Elementwise::Exp => x.exp(),
            Elementwise::Log => x.ln(),
            Elementwise::Relu => x.max(0.0),
            Elementwise::Add | Elementwise::Subtract | Elementwise::Hadamard => {
                unreachable!("binary kind used as unary")
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Builds a tensor, checking extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernel outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    /// Like `from_parts` but rejects NaN/Inf, naming the producing op.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Sub-tensor `index` along axis 0, with that axis removed.
    pub fn index0(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::shape("index0", format!("rank {} too small", self.rank())));
        }
        if index >= self.shape[0] {
            return Err(Error::OutOfRange {
                what: "axis 0",
                index,
                size: self.shape[0],
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Ok(Self::from_parts(self.shape[1..].to_vec(), data))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => {
                let f = match kind {
                    Elementwise::Add => |x: f64, y: f64| x + y,
                    Elementwise::Subtract => |x: f64, y: f64| x - y,
                    _ => |x: f64, y: f64| x * y,
                };
                let (shape, data) = kernels::broadcast_binary(kind.name(), a, b, f)?;
                Tensor::checked(kind.name(), shape, data)
            }
            (false, None) => {
                let data = a.data.iter().map(|&x| kind.apply_unary(x)).collect();
                Tensor::checked(kind.name(), a.shape.clone(), data)
            }
            (true, None) => Err(Error::Invalid(format!("{} needs two operands", kind.name()))),
            (false, Some(_)) => Err(Error::Invalid(format!("{} takes one operand", kind.name()))),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(Elementwise::Add, self, Some(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(Elementwise::Subtract, self, Some(other))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(Elementwise::Hadamard, self, Some(other))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::elementwise(Elementwise::Scale(c), self, None)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, data) = kernels::matmul(self, other)?;
        Tensor::checked("matmul", vec![m, n], data)
    }

    pub fn conv2d(&self, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
        let (shape, data) = kernels::conv2d(self, kernel, padding)?;
        Tensor::checked("conv2d", shape, data)
    }

    pub fn conv3d(&self, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
        let (shape, data) = kernels::conv3d(self, kernel, padding)?;
        Tensor::checked("conv3d", shape, data)
    }

    /// Softmax over every entry of a `1×H×W` map.
    pub fn softmax_spatial(&self) -> Result<Tensor> {
        if self.rank() != 3 || self.shape[0] != 1 {
            return Err(Error::shape(
                "softmax_spatial",
                format!("expected 1×H×W, got {:?}", self.shape),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_spatial" });
        }
        Tensor::checked("softmax_spatial", self.shape.clone(), kernels::softmax(&self.data))
    }

    /// Mean over each `H×W` plane of a `C×H×W` map.
    pub fn spatial_avg_pool(&self) -> Result<Tensor> {
        let (c, data) = kernels::spatial_avg_pool(self)?;
        Ok(Tensor::from_parts(vec![c], data))
    }
}

/// Index of the largest value; ties resolved toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
