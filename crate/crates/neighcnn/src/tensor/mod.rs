//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once built (cheap to clone, safe to share across
//! threads). Differentiable computations are recorded on a [`Graph`]; calling
//! [`Graph::backward`] fills per-node gradient slots that can be read back
//! through [`Var::grad`]. A finite-difference checker ([`grad_check`]) serves
//! as the independent oracle for every differentiable operation.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;

pub use gradcheck::{grad_check, max_rel_err, numeric_grad, GradCheckReport};
pub use graph::{batch_norm, conv2d, BnBatchStats, BnMode, BnStats, Graph, Var};
pub use param::Parameter;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Element type for tensors. `f64` is the testing default; `f32` is
/// selectable for faster training at relaxed tolerances.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Element dtype tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Tensor extents, rank 0 (scalar) through 4 (batch, channel, height, width).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("rank {} exceeds maximum {}", dims.len(), MAX_RANK),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    /// Interpret as (batch, channel, height, width); requires rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: self.dims.clone(),
                reason: "expected rank-4 (batch, channel, height, width)".into(),
            });
        }
        Ok((self.dims[0], self.dims[1], self.dims[2], self.dims[3]))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dims.is_empty() {
            return write!(f, "[scalar]");
        }
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

/// Immutable dense tensor in row-major layout.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!(
                    "element count {} does not match shape product {}",
                    data.len(),
                    shape.numel()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_shape_vec(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor::from_shape_vec(shape, vec![T::zero(); n]))
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor::from_shape_vec(shape, vec![value; n]))
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor::from_shape_vec(Shape::scalar(), vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor::from_shape_vec(shape, (0..n).map(&mut f).collect()))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let (_, ch, hh, ww) = self.shape.dims4().expect("rank-4 tensor");
        self.data[((b * ch + c) * hh + h) * ww + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_shape_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map(|x| x.max(lo).min(hi))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_shape_vec(
            self.shape.clone(),
            self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        )
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Replace one element; used by finite-difference probes.
    pub fn with_element(&self, index: usize, value: T) -> Tensor<T> {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Tensor::from_shape_vec(self.shape.clone(), data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.numel() <= 8 {
            write!(f, "{:?}", self.data())
        } else {
            write!(f, "[{} elements]", self.numel())
        }
    }
}

/// Concatenate [1,C,H,W] tensors along the batch axis.
pub fn stack_batch<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("stack_batch of empty slice".into()));
    }
    let (b0, c, h, w) = items[0].shape().dims4()?;
    if b0 != 1 {
        return Err(Error::InvalidArgument(
            "stack_batch expects batch extent 1 per item".into(),
        ));
    }
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for item in items {
        if item.shape() != items[0].shape() {
            return Err(Error::shape_mismatch(
                "stack_batch",
                items[0].shape(),
                item.shape(),
            ));
        }
        data.extend_from_slice(item.data());
    }
    Tensor::from_vec(&[items.len(), c, h, w], data)
}
