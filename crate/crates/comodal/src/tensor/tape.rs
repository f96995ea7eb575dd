//! Operation tape and the reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{NodeRef, Tensor, TensorError};

pub type NodeId = usize;

/// Backward rule: maps the node's output gradient to one gradient buffer per
/// recorded input, in input order.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    /// Tape positions of the inputs; `None` for untracked (constant) inputs.
    inputs: Vec<Option<NodeId>>,
    /// `None` for leaves.
    backward: Option<BackwardFn>,
    numel: usize,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Append-only record of one forward pass. Every node's inputs precede it,
/// so a single reverse sweep visits each node exactly once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records nothing; all operations produce untracked values.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a gradient-receiving leaf holding the given buffer.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.watch(&t))
    }

    /// A new leaf sharing `t`'s values. Any existing tape ancestry of `t` is
    /// ignored; gradients accumulate on the returned tensor.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            numel: t.numel(),
        });
        Tensor::shared(
            t.shape().to_vec(),
            t.data_arc(),
            Some(NodeRef { tape: self.id, id }),
        )
    }

    /// Record one operation. Returns an untracked tensor when the tape is
    /// not recording or no input is tracked.
    pub(crate) fn record<F>(
        &mut self,
        op: &'static str,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
        backward: F,
    ) -> Result<Tensor, TensorError>
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        self.record_shared(op, inputs, out_shape, Arc::new(out_data), backward)
    }

    /// Like [`Tape::record`] but sharing an existing buffer, so ops that
    /// save their own output for the backward rule avoid a copy.
    pub(crate) fn record_shared<F>(
        &mut self,
        op: &'static str,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Arc<Vec<f64>>,
        backward: F,
    ) -> Result<Tensor, TensorError>
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        let expected: usize = out_shape.iter().product();
        if expected != out_data.len() {
            return Err(TensorError::SizeMismatch {
                op,
                expected,
                got: out_data.len(),
            });
        }
        let mut input_ids = Vec::with_capacity(inputs.len());
        let mut any_tracked = false;
        for t in inputs {
            match t.node() {
                Some(r) => {
                    if r.tape != self.id {
                        return Err(TensorError::TapeMismatch { op });
                    }
                    any_tracked = true;
                    input_ids.push(Some(r.id));
                }
                None => input_ids.push(None),
            }
        }
        if !self.recording || !any_tracked {
            return Ok(Tensor::shared(out_shape, out_data, None));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            inputs: input_ids,
            backward: Some(Box::new(backward)),
            numel: out_data.len(),
        });
        Ok(Tensor::shared(
            out_shape,
            out_data,
            Some(NodeRef { tape: self.id, id }),
        ))
    }

    /// Reverse sweep from a scalar loss. Every tracked ancestor of the loss
    /// receives d(loss)/d(ancestor); multiple uses of a tensor accumulate
    /// additively.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = loss.node().ok_or_else(|| TensorError::Contract {
            op: "backward",
            msg: "loss is not recorded on a tape".to_string(),
        })?;
        if node.tape != self.id {
            return Err(TensorError::TapeMismatch { op: "backward" });
        }
        if loss.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got {} elements", loss.numel()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(out_grad) = grads[id].as_ref().map(|g| g.clone()) else {
                continue;
            };
            let n = &self.nodes[id];
            let Some(backward) = n.backward.as_ref() else {
                continue;
            };
            let contributions = backward(&out_grad);
            debug_assert_eq!(contributions.len(), n.inputs.len());
            for (slot, contrib) in n.inputs.iter().zip(contributions) {
                let Some(iid) = slot else { continue };
                debug_assert_eq!(contrib.len(), self.nodes[*iid].numel);
                match &mut grads[*iid] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            bufs: grads,
        })
    }
}

/// Gradient buffers produced by one [`Tape::backward`] call, queryable by
/// the tensors that participated in the pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` if `t` did not
    /// participate in the loss's ancestry. Shape matches `t`.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node()?;
        if node.tape != self.tape || !t.requires_grad() {
            return None;
        }
        self.bufs.get(node.id)?.as_deref()
    }

    /// Like [`Gradients::wrt`] but materializing zeros for absent buffers.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

/// Shared helper for ops: elementwise combine of two equal-length buffers.
pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_tracked_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, TensorError::Contract { .. }));

        let c = Tensor::scalar(1.0);
        let err = tape.backward(&c).unwrap_err();
        assert!(matches!(err, TensorError::Contract { .. }));
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut tape = Tape::inference();
        let x = tape.watch(&Tensor::scalar(2.0));
        assert!(!x.requires_grad());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn cross_tape_use_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.watch(&Tensor::scalar(1.0));
        let y = b.watch(&Tensor::scalar(2.0));
        let err = b.add(&x, &y).unwrap_err();
        assert!(matches!(err, TensorError::TapeMismatch { .. }));
    }
}
