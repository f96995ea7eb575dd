//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer. Differentiable
//! operations live on [`Tape`]: each call computes the forward value and
//! records a node holding the inputs and the backward rule, so that
//! [`Tape::backward`] can replay the tape in reverse and accumulate
//! gradients. Tapes are rebuilt per forward pass (define-by-run), which
//! keeps ablation modes that change the graph shape trivially correct.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use tape::{Gradients, NodeId, Tape};

use std::sync::Arc;

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {} and {}", format_shape(lhs), format_shape(rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} elements, got {got}")]
    SizeMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{op}: tensor belongs to a different tape")]
    TapeMismatch { op: &'static str },
}

pub(crate) fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// Reference to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: NodeId,
}

/// A shape-carrying float64 array, optionally tracked on a [`Tape`].
///
/// Cloning is cheap: the data buffer is shared behind an [`Arc`]. Scalars
/// have the empty shape `[]` (one element).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
    requires_grad: bool,
}

impl Tensor {
    /// Untracked tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::SizeMismatch {
                op: "from_vec",
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
            requires_grad: false,
        }
    }

    pub(crate) fn shared(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Tensor {
            shape,
            requires_grad: node.is_some(),
            data,
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract {
                op: "item",
                msg: format!("expected one element, got {}", self.data.len()),
            });
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, severed from the tape. Gradients never flow through the
    /// result into this tensor's producers. Idempotent.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_size() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::SizeMismatch { expected: 6, got: 5, .. }));
        let t = Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.25);
        assert!(s.shape().is_empty());
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 4.25);
    }

    #[test]
    fn detach_preserves_values_and_is_idempotent() {
        let t = Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.5]).unwrap();
        let d = t.detach();
        assert_eq!(d.data(), t.data());
        assert!(!d.requires_grad());
        let dd = d.detach();
        assert_eq!(dd.data(), t.data());
        assert!(dd.node().is_none());
    }
}
