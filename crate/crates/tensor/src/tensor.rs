use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        if numel(&shape) != values.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), values.len()),
            ));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Tensor::new(shape, vec![T::zero(); n])
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn scalar(x: T) -> Self {
        Tensor { shape: vec![1], values: vec![x], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(TensorError::shape(
                    "set_grad",
                    format!("gradient length {} != value length {}", g.len(), self.values.len()),
                ));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Simultaneous access to values and gradient, used by optimizers.
    pub fn values_and_grad_mut(&mut self) -> (&mut [T], Option<&mut Vec<T>>) {
        (&mut self.values, self.grad.as_mut())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
