//! Differentiable operations, each recorded with its backward rule.
//!
//! Shapes are validated eagerly; backward closures capture `Arc` clones of
//! whatever forward values the gradient rule needs.

use std::sync::Arc;

use super::tape::zip_map;
use super::{Tape, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn as_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Contract {
            op,
            msg: format!("expected a 2-D tensor, got shape {:?}", other),
        }),
    }
}

/// Trailing-axis split: `[..., c]` viewed as `rows × c`.
fn as_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape().split_last() {
        Some((c, _)) if t.numel() > 0 => Ok((t.numel() / c, *c)),
        _ => Err(TensorError::Contract {
            op,
            msg: format!("expected rank >= 1, got shape {:?}", t.shape()),
        }),
    }
}

/// Row-major layout after removing `axes`: returns the reduced shape and,
/// per *input* axis, the stride it contributes to the output flat index
/// (0 for pooled axes).
fn pooled_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut pooled = vec![false; shape.len()];
    for &ax in axes {
        pooled[ax] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&pooled)
        .filter(|(_, p)| !**p)
        .map(|(d, _)| *d)
        .collect();
    let mut ostride = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        if !pooled[ax] {
            ostride[ax] = acc;
            acc *= shape[ax];
        }
    }
    (out_shape, ostride)
}

/// Output flat index for input flat index `f` under a [`pooled_layout`].
fn pooled_index(f: usize, shape: &[usize], ostride: &[usize]) -> usize {
    let mut rem = f;
    let mut out = 0;
    for ax in (0..shape.len()).rev() {
        let c = rem % shape[ax];
        rem /= shape[ax];
        out += c * ostride[ax];
    }
    out
}

impl Tape {
    fn ew_binary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        fwd: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        same_shape(op, a, b)?;
        let out = zip_map(a.data(), b.data(), fwd);
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.record(op, &[a, b], a.shape().to_vec(), out, move |g| {
            let ga = g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(g, (x, y))| da(*x, *y, *g))
                .collect();
            let gb = g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(g, (x, y))| db(*x, *y, *g))
                .collect();
            vec![ga, gb]
        })
    }

    fn ew_unary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        fwd: fn(f64) -> f64,
        // (input, output, out_grad) -> in_grad
        dfn: fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = a.data().iter().map(|x| fwd(*x)).collect();
        let out = Arc::new(out);
        let saved_out = Arc::clone(&out);
        let ad = a.data_arc();
        self.record_shared(op, &[a], a.shape().to_vec(), out, move |g| {
            vec![g
                .iter()
                .zip(ad.iter().zip(saved_out.iter()))
                .map(|(g, (x, y))| dfn(*x, *y, *g))
                .collect()]
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_binary("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y, g| g / y,
            |x, y, g| -g * x / (y * y),
        )
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|x| c * x).collect();
        self.record("scale", &[a], a.shape().to_vec(), out, move |g| {
            vec![g.iter().map(|g| c * g).collect()]
        })
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|x| x + c).collect();
        self.record("add_scalar", &[a], a.shape().to_vec(), out, |g| {
            vec![g.to_vec()]
        })
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_unary("abs", a, f64::abs, |x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_unary(
            "relu",
            a,
            |x| x.max(0.0),
            |x, _, g| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_unary("log", a, f64::ln, |x, _, g| g / x)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.ew_unary("sqrt", a, f64::sqrt, |_, y, g| g / (2.0 * y))
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = as_2d("matmul", a)?;
        let (k2, n) = as_2d("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bd[p * n + j];
                }
            }
        }
        self.record("matmul", &[a, b], vec![m, n], out, move |g| {
            // dA = g · Bᵀ, dB = Aᵀ · g
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    for p in 0..k {
                        ga[i * k + p] += gij * bd[p * n + j];
                        gb[p * n + j] += ad[i * k + p] * gij;
                    }
                }
            }
            vec![ga, gb]
        })
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = as_2d("transpose", a)?;
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        self.record("transpose", &[a], vec![n, m], out, move |g| {
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            vec![ga]
        })
    }

    /// Temperature softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax_t(
        &mut self,
        a: &Tensor,
        axis: usize,
        temperature: f64,
    ) -> Result<Tensor, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::Param {
                op: "softmax_t",
                msg: format!("temperature must be > 0, got {temperature}"),
            });
        }
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax_t",
                axis,
                rank: shape.len(),
            });
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = a.data();
        let mut out = vec![0.0; a.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(ad[at(j)] / temperature);
                }
                let mut s = 0.0;
                for j in 0..n {
                    let e = (ad[at(j)] / temperature - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[at(j)] /= s;
                }
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let shape_v = shape.to_vec();
        self.record_shared("softmax_t", &[a], shape_v, out, move |g| {
            // dz_j = y_j (g_j − Σ_k y_k g_k) / T per slice
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += y[at(j)] * g[at(j)];
                    }
                    for j in 0..n {
                        ga[at(j)] = y[at(j)] * (g[at(j)] - dot) / temperature;
                    }
                }
            }
            vec![ga]
        })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let s: f64 = a.data().iter().sum();
        let n = a.numel();
        self.record("sum", &[a], vec![], vec![s], move |g| vec![vec![g[0]; n]])
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let n = a.numel();
        if n == 0 {
            return Err(TensorError::Contract {
                op: "mean",
                msg: "mean of an empty tensor".to_string(),
            });
        }
        let s: f64 = a.data().iter().sum::<f64>() / n as f64;
        self.record("mean", &[a], vec![], vec![s], move |g| {
            vec![vec![g[0] / n as f64; n]]
        })
    }

    /// Arithmetic mean over the named axes, which are removed from the
    /// shape; the gradient distributes 1/k to each pooled element.
    pub fn mean_pool(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = a.shape().to_vec();
        for (idx, &ax) in axes.iter().enumerate() {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "mean_pool",
                    axis: ax,
                    rank: shape.len(),
                });
            }
            if axes[..idx].contains(&ax) {
                return Err(TensorError::Param {
                    op: "mean_pool",
                    msg: format!("duplicate axis {ax}"),
                });
            }
        }
        if axes.is_empty() {
            return Ok(a.clone());
        }
        let (out_shape, ostride) = pooled_layout(&shape, axes);
        let k: usize = axes.iter().map(|&ax| shape[ax]).product();
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        for (f, v) in a.data().iter().enumerate() {
            out[pooled_index(f, &shape, &ostride)] += v / k as f64;
        }
        let numel = a.numel();
        self.record("mean_pool", &[a], out_shape, out, move |g| {
            let mut ga = vec![0.0; numel];
            for (f, slot) in ga.iter_mut().enumerate() {
                *slot = g[pooled_index(f, &shape, &ostride)] / k as f64;
            }
            vec![ga]
        })
    }

    /// View the same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != a.numel() {
            return Err(TensorError::SizeMismatch {
                op: "reshape",
                expected,
                got: a.numel(),
            });
        }
        self.record_shared("reshape", &[a], shape.to_vec(), a.data_arc(), |g| {
            vec![g.to_vec()]
        })
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let op = "concat_cols";
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op,
                msg: "no tensors to concatenate".to_string(),
            });
        }
        let (rows, _) = as_2d(op, parts[0])?;
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = as_2d(op, p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &c) in parts.iter().zip(&cols) {
            let pd = p.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        self.record(op, parts, vec![rows, total], out, move |g| {
            let mut grads = Vec::with_capacity(cols.len());
            let mut offset = 0;
            for &c in &cols {
                let mut gp = vec![0.0; rows * c];
                for r in 0..rows {
                    gp[r * c..(r + 1) * c]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                grads.push(gp);
                offset += c;
            }
            grads
        })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: &Tensor,
        start: usize,
        end: usize,
    ) -> Result<Tensor, TensorError> {
        let (rows, cols) = as_2d("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(TensorError::Contract {
                op: "slice_cols",
                msg: format!("column range {start}..{end} invalid for {cols} columns"),
            });
        }
        let w = end - start;
        let ad = a.data();
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&ad[r * cols + start..r * cols + end]);
        }
        self.record("slice_cols", &[a], vec![rows, w], out, move |g| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![ga]
        })
    }

    /// Stack row vectors (shape `[c]` or `[1×c]`) into an `[n×c]` matrix.
    pub fn stack_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let op = "stack_rows";
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op,
                msg: "no rows to stack".to_string(),
            });
        }
        let c = parts[0].numel();
        for p in parts {
            let row_like = matches!(p.shape(), [_] | [1, _]);
            if !row_like || p.numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let n = parts.len();
        let mut out = vec![0.0; n * c];
        for (r, p) in parts.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(p.data());
        }
        self.record(op, parts, vec![n, c], out, move |g| {
            (0..n).map(|r| g[r * c..(r + 1) * c].to_vec()).collect()
        })
    }

    /// Per-row gather: element `(r, cols[r])` of a 2-D tensor, as a vector.
    pub fn select_columns(&mut self, a: &Tensor, cols: &[usize]) -> Result<Tensor, TensorError> {
        let (rows, width) = as_2d("select_columns", a)?;
        if cols.len() != rows {
            return Err(TensorError::SizeMismatch {
                op: "select_columns",
                expected: rows,
                got: cols.len(),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::Contract {
                op: "select_columns",
                msg: format!("column index {bad} out of range for width {width}"),
            });
        }
        let ad = a.data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| ad[r * width + c]).collect();
        let cols = cols.to_vec();
        self.record("select_columns", &[a], vec![rows], out, move |g| {
            let mut ga = vec![0.0; rows * width];
            for (r, &c) in cols.iter().enumerate() {
                ga[r * width + c] = g[r];
            }
            vec![ga]
        })
    }

    /// Add a bias vector along the trailing axis.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let op = "add_bias";
        let (rows, c) = as_rows(op, x)?;
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data_arc();
        let out: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(f, v)| v + bd[f % c])
            .collect();
        self.record(op, &[x, b], x.shape().to_vec(), out, move |g| {
            let mut gb = vec![0.0; c];
            for r in 0..rows {
                for (j, slot) in gb.iter_mut().enumerate() {
                    *slot += g[r * c + j];
                }
            }
            vec![g.to_vec(), gb]
        })
    }

    /// Layer normalization over the trailing axis with learned gain/bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let op = "layer_norm";
        let (rows, c) = as_rows(op, x)?;
        if gamma.shape() != [c] || beta.shape() != gamma.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: if gamma.shape() == [c] {
                    beta.shape().to_vec()
                } else {
                    gamma.shape().to_vec()
                },
            });
        }
        let xd = x.data();
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..c {
                let xh = (row[j] - mu) * s;
                xhat[r * c + j] = xh;
                out[r * c + j] = gd[j] * xh + bd[j];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        self.record(op, &[x, gamma, beta], x.shape().to_vec(), out, move |g| {
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for r in 0..rows {
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for j in 0..c {
                    let f = r * c + j;
                    let h = g[f] * gd[j];
                    mean_h += h;
                    mean_hx += h * xhat[f];
                    gg[j] += g[f] * xhat[f];
                    gb[j] += g[f];
                }
                mean_h /= c as f64;
                mean_hx /= c as f64;
                for j in 0..c {
                    let f = r * c + j;
                    let h = g[f] * gd[j];
                    gx[f] = (h - mean_h - xhat[f] * mean_hx) * inv_std[r];
                }
            }
            vec![gx, gg, gb]
        })
    }

    /// 1-D cross-correlation of `x[c_in×l]` with kernels `w[c_out×c_in×k]`
    /// plus a per-channel bias, under the given stride and zero padding.
    pub fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let op = "conv1d";
        let (c_in, l) = as_2d(op, x)?;
        let (c_out, kc_in, k) = match w.shape() {
            [o, i, k] => (*o, *i, *k),
            other => {
                return Err(TensorError::Contract {
                    op,
                    msg: format!("kernels must be rank 3, got shape {:?}", other),
                })
            }
        };
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Param {
                op,
                msg: "stride must be >= 1".to_string(),
            });
        }
        if l + 2 * padding < k {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let l_out = (l + 2 * padding - k) / stride + 1;
        let (xd, wd, bd) = (x.data_arc(), w.data_arc(), b.data_arc());
        let mut out = vec![0.0; c_out * l_out];
        for o in 0..c_out {
            for t in 0..l_out {
                let mut acc = bd[o];
                for i in 0..c_in {
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += xd[i * l + pos as usize] * wd[(o * c_in + i) * k + j];
                        }
                    }
                }
                out[o * l_out + t] = acc;
            }
        }
        self.record(op, &[x, w, b], vec![c_out, l_out], out, move |g| {
            let mut gx = vec![0.0; c_in * l];
            let mut gw = vec![0.0; c_out * c_in * k];
            let mut gb = vec![0.0; c_out];
            for o in 0..c_out {
                for t in 0..l_out {
                    let gout = g[o * l_out + t];
                    gb[o] += gout;
                    for i in 0..c_in {
                        for j in 0..k {
                            let pos = (t * stride + j) as isize - padding as isize;
                            if pos >= 0 && (pos as usize) < l {
                                gx[i * l + pos as usize] += gout * wd[(o * c_in + i) * k + j];
                                gw[(o * c_in + i) * k + j] += gout * xd[i * l + pos as usize];
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        })
    }
}
