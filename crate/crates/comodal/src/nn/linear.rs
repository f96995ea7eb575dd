//! Affine layers: linear projection and layer normalization parameters.

use crate::tensor::{Tensor, TensorError};

use super::param::{InitKind, ParamId, ParamStore, Session};

/// Fully connected layer computing `x·W + b` on `[rows×d_in]` inputs.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        LinearLayer {
            weight: store.register(
                format!("{name}.weight"),
                vec![d_in, d_out],
                InitKind::Glorot {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            ),
            bias: store.register(format!("{name}.bias"), vec![d_out], InitKind::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: &Tensor) -> Result<Tensor, TensorError> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let y = sess.tape.matmul(x, &w)?;
        sess.tape.add_bias(&y, &b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Learned gain/bias pair for layer normalization over width `d`.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gamma: store.register(format!("{name}.gamma"), vec![d], InitKind::Ones),
            beta: store.register(format!("{name}.beta"), vec![d], InitKind::Zeros),
            d,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: &Tensor) -> Result<Tensor, TensorError> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        sess.tape.layer_norm(x, &gamma, &beta, 1e-8)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
