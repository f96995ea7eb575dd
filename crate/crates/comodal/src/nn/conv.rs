//! 1-D convolution layer over `[channels × length]` feature grids.

use crate::tensor::{Tensor, TensorError};

use super::param::{InitKind, ParamId, ParamStore, Session};

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv1dLayer {
            kernels: store.register(
                format!("{name}.weight"),
                vec![c_out, c_in, k],
                InitKind::Glorot {
                    fan_in: c_in * k,
                    fan_out: c_out * k,
                },
            ),
            bias: store.register(format!("{name}.bias"), vec![c_out], InitKind::Zeros),
            c_in,
            c_out,
            k,
            stride,
            padding,
        }
    }

    /// Output length for an input of length `l`, if any window fits.
    pub fn out_len(&self, l: usize) -> Option<usize> {
        (l + 2 * self.padding >= self.k).then(|| (l + 2 * self.padding - self.k) / self.stride + 1)
    }

    pub fn forward(&self, sess: &mut Session, x: &Tensor) -> Result<Tensor, TensorError> {
        let w = sess.param(self.kernels);
        let b = sess.param(self.bias);
        sess.tape.conv1d(x, &w, &b, self.stride, self.padding)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.kernels, self.bias]
    }
}
