//! Dense row-major tensors.
//!
//! A `Tensor` is an immutable shaped view of a reference-counted buffer.
//! Every tensor carries a process-unique id; gradients computed by a
//! [`crate::tape::Tape`] are addressed by that id.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique tensor identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense multi-dimensional array of scalars, row-major.
///
/// Rank 0 (empty shape) denotes a scalar with one element. Cloning is
/// cheap: the data buffer is shared, the identity is preserved.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    id: TensorId,
    requires_grad: bool,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from raw data. Fails if the element count does not
    /// match the shape or any extent is zero.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(
                "from_vec",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if data.len() != numel_of(shape) {
            return Err(Error::dimension(
                "from_vec",
                format!("{} elements do not fill shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            id: fresh_id(),
            requires_grad: false,
        })
    }

    /// A trainable leaf: identical to [`Tensor::from_vec`] but flagged so
    /// optimizers and gradient checks know to visit it.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::from_vec(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel_of(shape)]),
            id: fresh_id(),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel_of(shape)]),
            id: fresh_id(),
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            id: fresh_id(),
            requires_grad: false,
        }
    }

    /// Internal constructor for op outputs; data length must already match.
    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            shape,
            data: Arc::new(data),
            id: fresh_id(),
            requires_grad: false,
        }
    }

    /// Same buffer under a new shape with the same element count.
    pub(crate) fn view_as(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(self.numel(), numel_of(&shape));
        Tensor {
            shape,
            data: Arc::clone(&self.data),
            id: fresh_id(),
            requires_grad: false,
        }
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

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Re-types the buffer element-wise. Used to move models between the
    /// working precision and the oracle precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        let mut t = Tensor::from_parts(data, self.shape.clone());
        t.requires_grad = self.requires_grad;
        t
    }

    /// Largest absolute element-wise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dimension(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}
