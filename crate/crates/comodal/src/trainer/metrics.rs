//! Evaluation metrics and per-epoch records. Classification reports argmax
//! accuracy; regression reports mean absolute error, Pearson correlation,
//! and 7-class accuracy (both sides rounded to the nearest integer and
//! clipped to [-3, 3], exact-match rate).

use crate::model::{forward_all, CoTrainModel, ForwardMode, Labels};
use crate::objectives::{LossTerm, TaskKind};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::data::Split;

/// Task-appropriate metrics of one branch on one split.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchMetrics {
    Classification { accuracy: f64 },
    Regression { mae: f64, pearson: f64, acc_7: f64 },
}

impl BranchMetrics {
    /// Higher-is-better scalar used for model selection: accuracy, or
    /// negated MAE.
    pub fn selection_score(&self) -> f64 {
        match self {
            BranchMetrics::Classification { accuracy } => *accuracy,
            BranchMetrics::Regression { mae, .. } => -mae,
        }
    }

    /// `(name, value)` pairs for emission.
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        match self {
            BranchMetrics::Classification { accuracy } => vec![("accuracy", *accuracy)],
            BranchMetrics::Regression { mae, pearson, acc_7 } => {
                vec![("mae", *mae), ("pearson", *pearson), ("acc_7", *acc_7)]
            }
        }
    }
}

/// One evaluation (or one training epoch's loss breakdown).
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    /// Per-branch metrics; branch names are the modalities plus `"mm"`.
    pub branches: Vec<(String, BranchMetrics)>,
    /// Mean per-term training loss, present on `split == "train"` records.
    pub loss_terms: Vec<LossTerm>,
}

impl MetricsRecord {
    pub fn branch(&self, name: &str) -> Option<&BranchMetrics> {
        self.branches.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Argmax accuracy of `[B x C]` logits against class labels. Ties pick the
/// first maximal column.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(b, labels.len(), "one label per row");
    let data = logits.data();
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = &data[r * c..(r + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

pub fn mae(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    let n = preds.len() as f64;
    preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n
}

/// Sample Pearson correlation; 0.0 when either side has (numerically) zero
/// variance.
pub fn pearson(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    let denom = (vp * vt).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

fn round_clip_7(x: f64) -> i64 {
    (x.round().clamp(-3.0, 3.0)) as i64
}

/// Exact-match rate after rounding both sides to the nearest integer in
/// [-3, 3].
pub fn acc_7(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| round_clip_7(**p) == round_clip_7(**t))
        .count();
    hits as f64 / preds.len() as f64
}

fn column(preds: &Tensor) -> Vec<f64> {
    preds.data().to_vec()
}

/// Evaluate every branch of the model on a split, under the model's
/// configured run mode (the multimodal branch is skipped in `no_mm`).
pub fn evaluate(
    model: &CoTrainModel,
    split: &Split,
    task: &TaskKind,
) -> Result<MetricsRecord, TensorError> {
    if split.is_empty() {
        return Err(TensorError::Contract { op: "evaluate", msg: "empty split".into() });
    }
    let mode = if model.cfg.mode == crate::config::RunMode::NoMm {
        ForwardMode::NoMm
    } else {
        ForwardMode::Cotrain
    };
    let batch = split.full_batch();
    let mut sess = crate::nn::Session::inference(&model.store);
    let out = forward_all(model, &mut sess, &batch, mode)?;

    let metric = |preds: &Tensor| -> Result<BranchMetrics, TensorError> {
        match (task, &batch.labels) {
            (TaskKind::Classification { .. }, Labels::Class(ls)) => {
                Ok(BranchMetrics::Classification { accuracy: accuracy(preds, ls) })
            }
            (TaskKind::Regression, Labels::Value(ts)) => {
                let p = column(preds);
                Ok(BranchMetrics::Regression {
                    mae: mae(&p, ts),
                    pearson: pearson(&p, ts),
                    acc_7: acc_7(&p, ts),
                })
            }
            _ => Err(TensorError::Contract {
                op: "evaluate",
                msg: "label kind does not match the task".into(),
            }),
        }
    };

    let mut branches = Vec::with_capacity(out.uni.len() + 1);
    for (name, uni) in model.names.iter().zip(&out.uni) {
        branches.push((name.clone(), metric(&uni.pred)?));
    }
    if let Some(mm) = &out.mm {
        branches.push(("mm".to_string(), metric(&mm.pred)?));
    }
    Ok(MetricsRecord { epoch: 0, split: String::new(), branches, loss_terms: Vec::new() })
}
