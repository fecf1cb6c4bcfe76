//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value (shape + data, optional gradient). Computation
//! happens on a [`Tape`], which records every operation so that
//! [`Tape::backward`] can walk it in reverse. Model parameters live in a
//! [`ParamSet`] and are bound onto a tape for each forward pass.

pub mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;

pub use nn::{gelu, positional_encoding, AttnBlock, LayerNormParams, Linear, FFN_EXPANSION, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Bound, Checkpoint, ParamId, ParamSet, CHECKPOINT_FORMAT_VERSION};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T: Scalar = f64> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    #[serde(skip)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }
}
