//! Pre-norm transformer blocks and the cross-modal fusion stack.
//!
//! For M modalities the stack runs one block chain per ordered (src → dst)
//! pair — queries carry the destination stream, keys/values stay on the raw
//! source tokens — then concatenates each destination's incoming results,
//! projects back to width d, and optionally applies per-modality
//! self-attention blocks whose final probabilities feed attention-level
//! knowledge transfer.

use crate::tensor::{Tensor, TensorError};

use super::attention::{cross_attention, AttentionBlock};
use super::linear::{LayerNormParams, LinearLayer};
use super::param::{ParamId, ParamStore, Session};

/// Residual attention + feed-forward unit with pre-layer-norm.
#[derive(Debug)]
pub struct EncoderBlock {
    pub attn: AttentionBlock,
    pub norm_attn: LayerNormParams,
    pub ff1: LinearLayer,
    pub ff2: LinearLayer,
    pub norm_ff: LayerNormParams,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        expose_probs: bool,
    ) -> Self {
        EncoderBlock {
            attn: AttentionBlock::new(store, name, d, heads, expose_probs),
            norm_attn: LayerNormParams::new(store, &format!("{name}.norm1"), d),
            ff1: LinearLayer::new(store, &format!("{name}.ff.0"), d, ff_hidden),
            ff2: LinearLayer::new(store, &format!("{name}.ff.1"), ff_hidden, d),
            norm_ff: LayerNormParams::new(store, &format!("{name}.norm2"), d),
        }
    }

    /// `x + attn(norm(x), kv)` then `x + ff(norm(x))`; `kv = None` means
    /// self-attention over the normalized stream.
    pub fn forward(
        &self,
        sess: &mut Session,
        x: &Tensor,
        kv: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        let q = self.norm_attn.forward(sess, x)?;
        let attended = cross_attention(sess, &q, kv.unwrap_or(&q), &self.attn)?;
        let x = sess.tape.add(x, &attended)?;
        let h = self.norm_ff.forward(sess, &x)?;
        let h = self.ff1.forward(sess, &h)?;
        let h = sess.tape.relu(&h)?;
        let h = self.ff2.forward(sess, &h)?;
        sess.tape.add(&x, &h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.param_ids();
        ids.extend(self.norm_attn.param_ids());
        ids.extend(self.ff1.param_ids());
        ids.extend(self.ff2.param_ids());
        ids.extend(self.norm_ff.param_ids());
        ids
    }
}

/// One ordered cross-modal direction: queries from `dst`, keys/values from
/// `src`, refined through a chain of blocks.
#[derive(Debug)]
pub struct CrossDirection {
    pub src: usize,
    pub dst: usize,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Debug)]
pub struct TransformerStack {
    pub modalities: Vec<String>,
    pub d: usize,
    pub cross: Vec<CrossDirection>,
    /// Per destination modality: projection from the `(M−1)·d`-wide
    /// concatenation of incoming directions back to width d.
    pub fuse: Vec<LinearLayer>,
    pub self_blocks: Vec<Vec<EncoderBlock>>,
    pub positional: bool,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        modalities: &[String],
        d: usize,
        heads: usize,
        cross_depth: usize,
        self_depth: usize,
        ff_hidden: usize,
        positional: bool,
        expose_self_probs: bool,
    ) -> Self {
        assert!(modalities.len() >= 2, "cross-modal stack needs >= 2 modalities");
        assert!(cross_depth >= 1, "each direction needs >= 1 block");
        let m = modalities.len();
        let mut cross = Vec::with_capacity(m * (m - 1));
        for dst in 0..m {
            for src in 0..m {
                if src == dst {
                    continue;
                }
                let blocks = (0..cross_depth)
                    .map(|i| {
                        EncoderBlock::new(
                            store,
                            &format!("mm.cross.{}->{}.{i}", modalities[src], modalities[dst]),
                            d,
                            heads,
                            ff_hidden,
                            false,
                        )
                    })
                    .collect();
                cross.push(CrossDirection { src, dst, blocks });
            }
        }
        let fuse = modalities
            .iter()
            .map(|name| LinearLayer::new(store, &format!("mm.fuse.{name}"), (m - 1) * d, d))
            .collect();
        let self_blocks = modalities
            .iter()
            .map(|name| {
                (0..self_depth)
                    .map(|i| {
                        EncoderBlock::new(
                            store,
                            &format!("mm.self.{name}.{i}"),
                            d,
                            heads,
                            ff_hidden,
                            expose_self_probs && i + 1 == self_depth,
                        )
                    })
                    .collect()
            })
            .collect();
        TransformerStack {
            modalities: modalities.to_vec(),
            d,
            cross,
            fuse,
            self_blocks,
            positional,
        }
    }

    /// Fuse per-modality token sequences. Returns, per modality, the fused
    /// `[T_i×d]` features and (when self blocks expose them) the final self-
    /// attention probabilities, one `[T_i×T_i]` tensor per head.
    pub fn forward(
        &self,
        sess: &mut Session,
        features: &[Tensor],
    ) -> Result<(Vec<Tensor>, Vec<Option<Vec<Tensor>>>), TensorError> {
        let m = self.modalities.len();
        if features.len() != m {
            return Err(TensorError::Contract {
                op: "transformer_stack_forward",
                msg: format!("expected {m} modality features, got {}", features.len()),
            });
        }
        for f in features {
            if f.shape().len() != 2 || f.shape()[1] != self.d {
                return Err(TensorError::ShapeMismatch {
                    op: "transformer_stack_forward",
                    lhs: f.shape().to_vec(),
                    rhs: vec![0, self.d],
                });
            }
        }
        let mut tokens = Vec::with_capacity(m);
        for f in features {
            tokens.push(if self.positional {
                let pe = sinusoidal_encoding(f.shape()[0], self.d);
                sess.tape.add(f, &pe)?
            } else {
                f.clone()
            });
        }

        let mut fused = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m);
        for dst in 0..m {
            // all incoming directions, in source order
            let mut incoming = Vec::with_capacity(m - 1);
            for dir in self.cross.iter().filter(|dir| dir.dst == dst) {
                let mut stream = tokens[dst].clone();
                for block in &dir.blocks {
                    stream = block.forward(sess, &stream, Some(&tokens[dir.src]))?;
                }
                incoming.push(stream);
            }
            let refs: Vec<&Tensor> = incoming.iter().collect();
            let cat = sess.tape.concat_cols(&refs)?;
            let mut z = self.fuse[dst].forward(sess, &cat)?;
            for block in &self.self_blocks[dst] {
                z = block.forward(sess, &z, None)?;
            }
            probs.push(
                self.self_blocks[dst]
                    .last()
                    .and_then(|b| b.attn.last_probs()),
            );
            fused.push(z);
        }
        Ok((fused, probs))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for dir in &self.cross {
            for b in &dir.blocks {
                ids.extend(b.param_ids());
            }
        }
        for f in &self.fuse {
            ids.extend(f.param_ids());
        }
        for blocks in &self.self_blocks {
            for b in blocks {
                ids.extend(b.param_ids());
            }
        }
        ids
    }
}

/// Fixed sinusoidal positional encoding, `[t_len×d]`, untracked.
pub fn sinusoidal_encoding(t_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![t_len, d], data).unwrap()
}
