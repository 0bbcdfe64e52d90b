use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Process-unique identity of a parameter, used to route gradients off the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor with its gradient slot.
#[derive(Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    id: ParamId,
}

impl<T: Scalar> Clone for Parameter<T> {
    /// Clones get a fresh identity so their gradients never mix with the original's.
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
            id: ParamId::fresh(),
        }
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            id: ParamId::fresh(),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    /// Adds this parameter's entry of `grads` (if any) into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if let Some(g) = grads.get(self) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape("set_value", self.value.shape(), value.shape()));
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn parameters(&self) -> Vec<&Parameter<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for p in self.parameters_mut() {
            p.accumulate(grads)?;
        }
        Ok(())
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.trainable = trainable;
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }
}
