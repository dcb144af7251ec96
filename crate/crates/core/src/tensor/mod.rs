//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Operations record onto a [`Tape`] only when some input requires a
//! gradient; inference paths therefore build no graph at all. Backward walks
//! the tape in reverse insertion order (which is a topological order by
//! construction) and visits each node exactly once.

mod autograd;
mod fdcheck;
pub mod matmul;
mod ops;
mod tape;

pub use autograd::{backward, GradientMap};
pub use fdcheck::finite_diff_check;
pub use tape::{Op, Tape};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Dense tensor. Data is immutable after construction; cloning shares the
/// underlying buffer.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeHandle<S>>,
    requires_grad: bool,
}

#[derive(Clone)]
pub(crate) struct NodeHandle<S: Scalar> {
    pub tape: Tape<S>,
    pub index: usize,
}

impl<S: Scalar> Tensor<S> {
    /// Plain tensor from raw data; participates in no graph.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); n]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::invalid("item", format!("tensor has shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Detach from the graph: same data, no node.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<S>>, node: Option<NodeHandle<S>>, requires_grad: bool) -> Self {
        Tensor {
            shape,
            data,
            node,
            requires_grad,
        }
    }

    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        ops::matmul(self, rhs)
    }
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        ops::add(self, rhs)
    }
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        ops::mul(self, rhs)
    }
    pub fn neg(&self) -> Result<Tensor<S>> {
        ops::neg(self)
    }
    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        ops::scale(self, c)
    }
    pub fn softmax(&self) -> Result<Tensor<S>> {
        ops::softmax(self)
    }
    pub fn gelu(&self) -> Result<Tensor<S>> {
        ops::gelu(self)
    }
    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        ops::sigmoid(self)
    }
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        ops::sum_all(self)
    }
    pub fn mean_all(&self) -> Result<Tensor<S>> {
        ops::mean_all(self)
    }
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        ops::reshape(self, shape)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

pub use ops::{
    add, concat_rows, cross_entropy, embed_gather, gelu, matmul, mean_all, mse, mul, neg,
    reindex, reshape, rms_norm, scale, sigmoid, softmax, sum_all,
};

/// Checks that every value is finite; the forward suite rejects non-finite
/// inputs so NaN/Inf can never propagate silently.
pub(crate) fn check_finite<S: Scalar>(data: &[S], op: &'static str) -> Result<()> {
    for v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite { op });
        }
    }
    Ok(())
}
