//! The runnable finite-difference suite: every differentiable operation and
//! every loss, each checked against central differences on a seeded,
//! well-conditioned probe (inputs kept away from kinks of `abs`/`relu`, from
//! `log`/`sqrt` domain edges, and from zero denominators, so the comparison
//! measures the analytic gradient and not the probe's own conditioning).
//!
//! Losses with a teacher stop-gradient need care: perturbing anything the
//! *teacher* depends on moves the numeric derivative but by design not the
//! analytic one. Loss-level checks therefore hold the teacher constant, and
//! the joint-objective checks compare only parameters with no path into the
//! teacher (tails, heads, transfer projectors — not stems, not the
//! multimodal branch).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::model::{build_model, forward_all, ForwardMode};
use crate::nn::{finite_diff_check_store, finite_diff_check_store_where, InitKind, ParamStore};
use crate::objectives::{
    kt_attention, kt_decision, kt_feature, task_loss_classification, task_loss_regression,
    total_loss,
};
use crate::tensor::{finite_diff_check_multi, Tape, Tensor, TensorError};
use crate::trainer::generate_synthetic;

/// Pinned pass tolerance on the max relative gradient error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with `min_abs <= |v| <= max_abs` and random signs.
fn away_from_zero(seed: u64, n: usize, min_abs: f64, max_abs: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(min_abs..max_abs);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data).expect("probe shapes are consistent")
}

/// Scalarize with fixed distinct positive weights so directional errors
/// (e.g. a transposed gradient) cannot cancel under a plain sum.
fn weighted(tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let w: Vec<f64> = (0..x.numel()).map(|i| 0.3 + 0.11 * ((i * 7 % 13) as f64)).collect();
    let wl = tape.leaf(x.shape().to_vec(), w)?;
    let prod = tape.mul(x, &wl)?;
    tape.sum(&prod)
}

/// Row-stochastic matrix (plain softmax of a seeded matrix), used as a
/// constant teacher attention map.
fn stochastic_rows(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let raw = uniform(seed, rows * cols, -1.0, 1.0);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &raw[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..cols {
            out[r * cols + c] = exps[c] / z;
        }
    }
    out
}

type Check = (&'static str, fn() -> Result<f64, TensorError>);

fn op_checks() -> Vec<Check> {
    vec![
        ("op.add", || {
            let a = t(&[2, 3], uniform(1, 6, -1.5, 1.5));
            let b = t(&[2, 3], uniform(2, 6, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.add(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.sub", || {
            let a = t(&[2, 3], uniform(3, 6, -1.5, 1.5));
            let b = t(&[2, 3], uniform(4, 6, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.sub(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.mul", || {
            let a = t(&[2, 3], uniform(5, 6, -1.5, 1.5));
            let b = t(&[2, 3], uniform(6, 6, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.mul(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.div", || {
            let a = t(&[2, 3], uniform(7, 6, -1.5, 1.5));
            let b = t(&[2, 3], away_from_zero(8, 6, 0.6, 1.6));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.div(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.scale", || {
            let a = t(&[4], uniform(9, 4, -2.0, 2.0));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.scale(&xs[0], -1.7)?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.add_scalar", || {
            let a = t(&[4], uniform(10, 4, -2.0, 2.0));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.add_scalar(&xs[0], 0.37)?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.abs", || {
            let a = t(&[6], away_from_zero(11, 6, 0.25, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.abs(&xs[0])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.relu", || {
            let a = t(&[6], away_from_zero(12, 6, 0.25, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.relu(&xs[0])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.log", || {
            let a = t(&[5], uniform(13, 5, 0.3, 2.2));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.log(&xs[0])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.sqrt", || {
            let a = t(&[5], uniform(14, 5, 0.25, 2.2));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.sqrt(&xs[0])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.matmul", || {
            let a = t(&[3, 4], uniform(15, 12, -1.0, 1.0));
            let b = t(&[4, 2], uniform(16, 8, -1.0, 1.0));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.matmul(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.transpose", || {
            let a = t(&[3, 4], uniform(17, 12, -1.0, 1.0));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.transpose(&xs[0])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.softmax_t.axis1", || {
            let a = t(&[2, 5], uniform(18, 10, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.softmax_t(&xs[0], 1, 2.5)?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.softmax_t.axis0", || {
            let a = t(&[4, 3], uniform(19, 12, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.softmax_t(&xs[0], 0, 0.7)?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.sum", || {
            let a = t(&[7], uniform(20, 7, -2.0, 2.0));
            finite_diff_check_multi(|tape, xs| tape.sum(&xs[0]), &[a], 1e-5)
        }),
        ("op.mean", || {
            let a = t(&[2, 3], uniform(21, 6, -2.0, 2.0));
            finite_diff_check_multi(|tape, xs| tape.mean(&xs[0]), &[a], 1e-5)
        }),
        ("op.mean_pool.mid", || {
            let a = t(&[2, 3, 4], uniform(22, 24, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.mean_pool(&xs[0], &[1])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.mean_pool.ends", || {
            let a = t(&[2, 3, 4], uniform(23, 24, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.mean_pool(&xs[0], &[0, 2])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.reshape", || {
            let a = t(&[2, 6], uniform(24, 12, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.reshape(&xs[0], &[3, 4])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.concat_cols", || {
            let a = t(&[2, 2], uniform(25, 4, -1.5, 1.5));
            let b = t(&[2, 3], uniform(26, 6, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.concat_cols(&[&xs[0], &xs[1]])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.slice_cols", || {
            let a = t(&[2, 5], uniform(27, 10, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.slice_cols(&xs[0], 1, 4)?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.stack_rows", || {
            let a = t(&[4], uniform(28, 4, -1.5, 1.5));
            let b = t(&[1, 4], uniform(29, 4, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.stack_rows(&[&xs[0], &xs[1]])?;
                    weighted(tape, &y)
                },
                &[a, b],
                1e-5,
            )
        }),
        ("op.select_columns", || {
            // a repeated column exercises gradient accumulation
            let a = t(&[3, 4], uniform(30, 12, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.select_columns(&xs[0], &[2, 0, 2])?;
                    weighted(tape, &y)
                },
                &[a],
                1e-5,
            )
        }),
        ("op.add_bias", || {
            let x = t(&[3, 4], uniform(31, 12, -1.5, 1.5));
            let b = t(&[4], uniform(32, 4, -1.0, 1.0));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.add_bias(&xs[0], &xs[1])?;
                    weighted(tape, &y)
                },
                &[x, b],
                1e-5,
            )
        }),
        ("op.layer_norm", || {
            let x = t(&[2, 6], uniform(33, 12, -1.5, 1.5));
            let g = t(&[6], uniform(34, 6, 0.5, 1.5));
            let b = t(&[6], uniform(35, 6, -0.5, 0.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.layer_norm(&xs[0], &xs[1], &xs[2], 1e-5)?;
                    weighted(tape, &y)
                },
                &[x, g, b],
                1e-5,
            )
        }),
        ("op.conv1d", || {
            let x = t(&[2, 8], uniform(36, 16, -1.5, 1.5));
            let w = t(&[3, 2, 3], uniform(37, 18, -1.0, 1.0));
            let b = t(&[3], uniform(38, 3, -0.5, 0.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.conv1d(&xs[0], &xs[1], &xs[2], 1, 1)?;
                    weighted(tape, &y)
                },
                &[x, w, b],
                1e-5,
            )
        }),
        ("op.conv1d.strided", || {
            let x = t(&[2, 9], uniform(39, 18, -1.5, 1.5));
            let w = t(&[2, 2, 3], uniform(40, 12, -1.0, 1.0));
            let b = t(&[2], uniform(41, 2, -0.5, 0.5));
            finite_diff_check_multi(
                |tape, xs| {
                    let y = tape.conv1d(&xs[0], &xs[1], &xs[2], 2, 0)?;
                    weighted(tape, &y)
                },
                &[x, w, b],
                1e-5,
            )
        }),
    ]
}

fn loss_checks() -> Vec<Check> {
    vec![
        ("loss.task_classification", || {
            let logits = t(&[4, 3], uniform(50, 12, -1.5, 1.5));
            finite_diff_check_multi(
                |tape, xs| task_loss_classification(tape, &xs[0], &[0, 2, 1, 1]),
                &[logits],
                1e-5,
            )
        }),
        ("loss.task_regression", || {
            let preds = t(&[5, 1], uniform(51, 5, -2.0, 2.0));
            // targets offset so every residual stays away from the MAE kink
            finite_diff_check_multi(
                |tape, xs| task_loss_regression(tape, &xs[0], &[3.0, 3.1, 2.9, 3.2, 2.8]),
                &[preds],
                1e-5,
            )
        }),
        ("loss.kt_decision", || {
            let student = t(&[3, 4], uniform(52, 12, -1.5, 1.5));
            let teacher_data = uniform(53, 12, -1.5, 1.5);
            finite_diff_check_multi(
                move |tape, xs| {
                    let teacher = tape.leaf(vec![3, 4], teacher_data.clone())?;
                    kt_decision(tape, &xs[0], &teacher, 3.0)
                },
                &[student],
                1e-5,
            )
        }),
        ("loss.kt_feature", || {
            let mut store = ParamStore::new();
            let sid = store.register("student", vec![2, 5], InitKind::Zeros);
            store
                .set_data(sid, away_from_zero(54, 10, 0.3, 1.5))
                .expect("matching size");
            let teacher_data = away_from_zero(55, 10, 0.3, 1.5);
            finite_diff_check_store(
                &mut store,
                move |sess| {
                    let s = sess.param(sid);
                    let teacher = sess.tape.leaf(vec![2, 5], teacher_data.clone())?;
                    kt_feature(sess, &s, &teacher, None)
                },
                1e-5,
            )
        }),
        ("loss.kt_attention", || {
            let student_raw = t(&[3, 3], uniform(56, 9, -1.0, 1.0));
            let teacher_data = stochastic_rows(57, 3, 3);
            finite_diff_check_multi(
                move |tape, xs| {
                    let s_map = tape.softmax_t(&xs[0], 1, 1.0)?;
                    let t_map = tape.leaf(vec![3, 3], teacher_data.clone())?;
                    kt_attention(tape, &[s_map], &[t_map])
                },
                &[student_raw],
                1e-5,
            )
        }),
    ]
}

fn suite_cfg(extra: &str) -> ExperimentConfig {
    let json = format!(
        r#"{{"modalities": [
            {{"name": "a", "channels": 2, "length": 6, "tail_conv": [],
             "stem": [{{"out_channels": 3, "kernel": 3}}]{extra_mod}}},
            {{"name": "b", "channels": 2, "length": 6, "tail_conv": [],
             "stem": [{{"out_channels": 3, "kernel": 3}}]{extra_mod}}}
        ],
        "mm": {{"d_model": 4, "heads": 1, "cross_depth": 1, "self_depth": 1,
                "ff_hidden": 4, "positional": true}},
        "task": {{"kind": "classification", "classes": 3}},
        "data": {{"latent_dim": 4, "train": 2, "val": 1, "test": 1}},
        "epochs": 1, "batch_size": 2, "seed": 9{extra}}}"#,
        extra_mod = if extra.contains("attention") { r#", "self_attention_tail": true"# } else { "" },
    );
    serde_json::from_str::<ExperimentConfig>(&json)
        .expect("suite config parses")
        .validated()
        .expect("suite config is valid")
}

/// Finite-difference the joint objective through a small end-to-end model,
/// comparing parameters selected by `keep`.
fn check_total(
    cfg: &ExperimentConfig,
    keep: fn(&str) -> bool,
) -> Result<f64, TensorError> {
    let mut model = build_model(cfg).expect("suite config builds");
    model.store.init_params(cfg.seed);
    let batch = generate_synthetic(cfg, cfg.seed)
        .expect("suite config generates")
        .train
        .full_batch();
    let names = model.names.clone();
    let weights = cfg.loss;
    let kt_mode = cfg.kt_mode;
    let task = cfg.task.clone();
    // the forward pass reads parameters only through the session, so the
    // store can be checked outside the model; the shallow model keeps
    // truncation error low at h = 1e-4, where subtractive cancellation noise
    // sits well below the 1e-5 gate
    let mut store = std::mem::take(&mut model.store);
    let model_ref = &model;
    let worst = finite_diff_check_store_where(
        &mut store,
        |sess| {
            let out = forward_all(model_ref, sess, &batch, ForwardMode::Cotrain)?;
            let breakdown = total_loss(
                sess,
                &names,
                &out,
                &batch.labels,
                &weights,
                kt_mode,
                &task,
                &model_ref.kt_projs,
            )?;
            Ok(breakdown.total)
        },
        1e-4,
        keep,
    )?;
    Ok(worst)
}

/// No path into a KT teacher: unimodal tails and heads plus transfer
/// projectors. Stems feed the multimodal branch (hence the teacher), and the
/// multimodal branch is the teacher.
fn student_side(name: &str) -> bool {
    !name.starts_with("mm.")
        && (name.contains(".tail") || name.contains(".head") || name.starts_with("kt.proj"))
}

fn total_checks() -> Vec<Check> {
    vec![
        ("total.cotrain_task", || {
            // alpha = 0: no stop-gradient anywhere, so every parameter of the
            // joint graph is comparable
            let cfg = suite_cfg(r#", "loss": {"alpha": 0.0, "beta": 1.0, "gamma": 1.0}"#);
            check_total(&cfg, |_| true)
        }),
        ("total.kt_decision", || {
            let cfg = suite_cfg(r#", "loss": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0}"#);
            check_total(&cfg, student_side)
        }),
        ("total.kt_feature_projected", || {
            // tail width 5 differs from the fused width, forcing a projector
            let cfg = suite_cfg(
                r#", "loss": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0},
                   "kt_mode": "feature""#,
            );
            let mut cfg = cfg;
            for m in &mut cfg.modalities {
                m.tail_hidden = vec![5];
            }
            check_total(&cfg.validated().expect("still valid"), student_side)
        }),
        ("total.kt_attention", || {
            let cfg = suite_cfg(
                r#", "loss": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0},
                   "kt_mode": "attention""#,
            );
            check_total(&cfg, student_side)
        }),
    ]
}

/// Run the whole suite. Deterministic; a few seconds of work.
pub fn run_all() -> Result<Vec<CheckResult>, TensorError> {
    let mut results = Vec::new();
    for (name, f) in op_checks().into_iter().chain(loss_checks()).chain(total_checks()) {
        results.push(CheckResult { name, max_rel_err: f()? });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn every_check_passes_the_pinned_tolerance_quickly() {
        let start = Instant::now();
        let results = run_all().unwrap();
        let elapsed = start.elapsed();
        assert!(results.len() >= 36, "suite shrank to {}", results.len());
        for r in &results {
            assert!(r.pass(), "{} failed: max rel err {}", r.name, r.max_rel_err);
        }
        assert!(elapsed.as_secs() < 60, "suite took {elapsed:?}");
    }

    #[test]
    fn the_suite_covers_every_op_and_loss() {
        let names: Vec<&str> = run_all().unwrap().iter().map(|r| r.name).collect();
        for op in [
            "op.add", "op.sub", "op.mul", "op.div", "op.scale", "op.add_scalar", "op.abs",
            "op.relu", "op.log", "op.sqrt", "op.matmul", "op.transpose", "op.softmax_t.axis1",
            "op.softmax_t.axis0", "op.sum", "op.mean", "op.mean_pool.mid", "op.mean_pool.ends",
            "op.reshape", "op.concat_cols", "op.slice_cols", "op.stack_rows",
            "op.select_columns", "op.add_bias", "op.layer_norm", "op.conv1d",
            "op.conv1d.strided", "loss.task_classification", "loss.task_regression",
            "loss.kt_decision", "loss.kt_feature", "loss.kt_attention", "total.cotrain_task",
            "total.kt_decision", "total.kt_feature_projected", "total.kt_attention",
        ] {
            assert!(names.contains(&op), "missing check {op}");
        }
    }
}
