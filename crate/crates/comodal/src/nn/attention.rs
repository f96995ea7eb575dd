//! Scaled dot-product attention with query/key/value/output projections.
//!
//! `cross_attention` fuses key/value tokens from one modality into query
//! tokens from another; with both sides equal it reduces exactly to
//! self-attention.

use std::cell::RefCell;

use crate::tensor::{Tensor, TensorError};

use super::param::{InitKind, ParamId, ParamStore, Session};

#[derive(Debug)]
pub struct AttentionBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d: usize,
    pub heads: usize,
    pub expose_probs: bool,
    /// Last forward's softmax probabilities, one `[T_q×T_k]` per head;
    /// populated only when `expose_probs` is set.
    probs: RefCell<Option<Vec<Tensor>>>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        expose_probs: bool,
    ) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible into {heads} heads");
        let proj = |store: &mut ParamStore, suffix: &str| {
            store.register(
                format!("{name}.{suffix}"),
                vec![d, d],
                InitKind::Glorot { fan_in: d, fan_out: d },
            )
        };
        AttentionBlock {
            w_q: proj(store, "Wq"),
            w_k: proj(store, "Wk"),
            w_v: proj(store, "Wv"),
            w_o: proj(store, "Wo"),
            d,
            heads,
            expose_probs,
            probs: RefCell::new(None),
        }
    }

    /// Probabilities cached by the last exposing forward.
    pub fn last_probs(&self) -> Option<Vec<Tensor>> {
        self.probs.borrow().clone()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Attention of `phi_a` (queries, `[T_a×d]`) over `phi_b` (keys/values,
/// `[T_b×d]`): per head, `softmax(Q_h·K_hᵀ/√d_head)·V_h`; heads concatenated
/// and projected by `W_o`. The output has `T_a` rows.
pub fn cross_attention(
    sess: &mut Session,
    phi_a: &Tensor,
    phi_b: &Tensor,
    block: &AttentionBlock,
) -> Result<Tensor, TensorError> {
    for phi in [phi_a, phi_b] {
        if phi.shape().len() != 2 || phi.shape()[1] != block.d {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: phi.shape().to_vec(),
                rhs: vec![block.d, block.d],
            });
        }
    }
    let (wq, wk, wv, wo) = (
        sess.param(block.w_q),
        sess.param(block.w_k),
        sess.param(block.w_v),
        sess.param(block.w_o),
    );
    let q = sess.tape.matmul(phi_a, &wq)?;
    let k = sess.tape.matmul(phi_b, &wk)?;
    let v = sess.tape.matmul(phi_b, &wv)?;

    let dh = block.d / block.heads;
    let mut head_outs = Vec::with_capacity(block.heads);
    let mut head_probs = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = sess.tape.slice_cols(&q, lo, hi)?;
        let kh = sess.tape.slice_cols(&k, lo, hi)?;
        let vh = sess.tape.slice_cols(&v, lo, hi)?;
        let kt = sess.tape.transpose(&kh)?;
        let scores = sess.tape.matmul(&qh, &kt)?;
        let scaled = sess.tape.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        let probs = sess.tape.softmax_t(&scaled, 1, 1.0)?;
        head_outs.push(sess.tape.matmul(&probs, &vh)?);
        if block.expose_probs {
            head_probs.push(probs);
        }
    }
    if block.expose_probs {
        *block.probs.borrow_mut() = Some(head_probs);
    }
    let merged = if head_outs.len() == 1 {
        head_outs.pop().unwrap()
    } else {
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        sess.tape.concat_cols(&refs)?
    };
    sess.tape.matmul(&merged, &wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_block(store: &mut ParamStore, d: usize, heads: usize) -> AttentionBlock {
        let block = AttentionBlock::new(store, "attn", d, heads, true);
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        for id in block.param_ids() {
            store.set_data(id, eye.clone()).unwrap();
        }
        block
    }

    /// Step-by-step attention computed with plain loops, no tensor ops.
    fn brute_force_attention(phi_a: &[Vec<f64>], phi_b: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
        let scale = 1.0 / (d as f64).sqrt();
        phi_a
            .iter()
            .map(|q| {
                let scores: Vec<f64> = phi_b
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut out = vec![0.0; d];
                for (w, key_val) in exps.iter().zip(phi_b) {
                    for (o, v) in out.iter_mut().zip(key_val) {
                        *o += (w / z) * v;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn identity_projections_match_brute_force_oracle() {
        let mut store = ParamStore::new();
        let block = identity_block(&mut store, 2, 1);
        let mut sess = Session::inference(&store);

        let a_rows = vec![vec![0.3, -0.7], vec![1.1, 0.4]];
        let b_rows = vec![vec![0.9, 0.2], vec![-0.5, 0.6]];
        let phi_a = Tensor::from_vec(vec![2, 2], a_rows.concat()).unwrap();
        let phi_b = Tensor::from_vec(vec![2, 2], b_rows.concat()).unwrap();

        let out = cross_attention(&mut sess, &phi_a, &phi_b, &block).unwrap();
        let expect = brute_force_attention(&a_rows, &b_rows, 2);
        for (got, want) in out.data().iter().zip(expect.concat()) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn single_key_attends_with_weight_one() {
        let mut store = ParamStore::new();
        let block = identity_block(&mut store, 2, 1);
        let mut sess = Session::inference(&store);
        let phi_a = Tensor::from_vec(vec![3, 2], vec![5.0, -2.0, 0.0, 0.1, 7.5, 3.3]).unwrap();
        let phi_b = Tensor::from_vec(vec![1, 2], vec![0.4, -1.2]).unwrap();
        let out = cross_attention(&mut sess, &phi_a, &phi_b, &block).unwrap();
        // every query row equals the single value row exactly
        for r in 0..3 {
            assert_eq!(&out.data()[r * 2..(r + 1) * 2], phi_b.data());
        }
        let probs = block.last_probs().unwrap();
        assert!(probs[0].data().iter().all(|p| *p == 1.0));
    }

    #[test]
    fn self_attention_is_cross_attention_with_itself() {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "attn", 4, 2, false);
        store.init_params(3);
        let phi = Tensor::from_vec(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let mut sess = Session::inference(&store);
        let a = cross_attention(&mut sess, &phi, &phi, &block).unwrap();
        let b = cross_attention(&mut sess, &phi, &phi.clone(), &block).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn exposed_probability_rows_are_distributions() {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "attn", 4, 2, true);
        store.init_params(5);
        let phi_a = Tensor::from_vec(vec![3, 4], (0..12).map(|i| (i as f64 * 0.61).cos()).collect())
            .unwrap();
        let phi_b = Tensor::from_vec(vec![5, 4], (0..20).map(|i| (i as f64 * 0.23).sin()).collect())
            .unwrap();
        let mut sess = Session::inference(&store);
        cross_attention(&mut sess, &phi_a, &phi_b, &block).unwrap();
        let probs = block.last_probs().unwrap();
        assert_eq!(probs.len(), 2);
        for p in &probs {
            assert_eq!(p.shape(), &[3, 5]);
            for r in 0..3 {
                let row = &p.data()[r * 5..(r + 1) * 5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn permuting_key_value_rows_leaves_output_unchanged() {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "attn", 4, 1, false);
        store.init_params(9);
        let phi_a = Tensor::from_vec(vec![2, 4], (0..8).map(|i| (i as f64 * 0.7).sin()).collect())
            .unwrap();
        let b_data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.41).cos()).collect();
        let phi_b = Tensor::from_vec(vec![4, 4], b_data.clone()).unwrap();
        // reverse the key/value rows
        let permuted: Vec<f64> = (0..4).rev().flat_map(|r| b_data[r * 4..(r + 1) * 4].to_vec()).collect();
        let phi_b_perm = Tensor::from_vec(vec![4, 4], permuted).unwrap();

        let mut sess = Session::inference(&store);
        let out = cross_attention(&mut sess, &phi_a, &phi_b, &block).unwrap();
        let out_perm = cross_attention(&mut sess, &phi_a, &phi_b_perm, &block).unwrap();
        for (a, b) in out.data().iter().zip(out_perm.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_pass_finite_differences() {
        use crate::tensor::finite_diff_check_multi;
        let phi_a = Tensor::from_vec(vec![2, 2], vec![0.3, -0.4, 0.8, 0.1]).unwrap();
        let phi_b = Tensor::from_vec(vec![3, 2], vec![0.5, 0.2, -0.6, 0.9, 0.05, -0.3]).unwrap();
        let wq = Tensor::from_vec(vec![2, 2], vec![0.7, -0.2, 0.4, 0.6]).unwrap();
        let wk = Tensor::from_vec(vec![2, 2], vec![0.1, 0.9, -0.5, 0.3]).unwrap();
        let wv = Tensor::from_vec(vec![2, 2], vec![0.8, 0.1, 0.2, -0.7]).unwrap();
        let err = finite_diff_check_multi(
            |tape, xs| {
                let q = tape.matmul(&xs[0], &xs[2])?;
                let k = tape.matmul(&xs[1], &xs[3])?;
                let v = tape.matmul(&xs[1], &xs[4])?;
                let kt = tape.transpose(&k)?;
                let scores = tape.matmul(&q, &kt)?;
                let scaled = tape.scale(&scores, 1.0 / 2.0_f64.sqrt())?;
                let probs = tape.softmax_t(&scaled, 1, 1.0)?;
                let out = tape.matmul(&probs, &v)?;
                let sq = tape.mul(&out, &out)?;
                tape.mean(&sq)
            },
            &[phi_a, phi_b, wq, wk, wv],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
