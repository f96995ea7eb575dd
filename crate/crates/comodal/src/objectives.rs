//! Training objectives: per-branch task losses, the three knowledge-transfer
//! losses (decision / feature / attention level), and the weighted joint
//! objective.
//!
//! Invariants the functions here guarantee structurally rather than
//! numerically:
//! - every transfer loss detaches the teacher inputs, so the multimodal
//!   branch never receives gradient from transfer terms;
//! - a term with zero weight (or a disabled transfer mode) is never recorded
//!   on the tape, so parameters only it touches end up with *absent*
//!   gradients, not zero gradients.

use serde::{Deserialize, Serialize};

use crate::model::{BranchOutputs, Labels};
use crate::nn::{LinearLayer, Session};
use crate::tensor::{Tape, Tensor, TensorError};

/// Weights of the joint objective
/// `alpha * sum_i L_kt(i) + beta * sum_i L_task(i) + gamma * L_task(mm)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Softmax temperature for decision-level transfer.
    pub temperature: f64,
}

impl Default for LossWeights {
    /// `beta` and `gamma` are fixed to 1; `alpha` and `temperature` are tuned
    /// on the builtin synthetic task, where the softer teacher signal of a
    /// small temperature transfers better than large-scale defaults.
    fn default() -> Self {
        LossWeights {
            alpha: 6.0,
            beta: 1.0,
            gamma: 1.0,
            temperature: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KtMode {
    #[default]
    Decision,
    Feature,
    Attention,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl Default for TaskKind {
    fn default() -> Self {
        TaskKind::Classification { classes: 4 }
    }
}

impl TaskKind {
    /// Output width of every prediction head.
    pub fn head_width(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression => 1,
        }
    }
}

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract { op, msg: msg.into() }
}

/// Mean negative log-likelihood of the labelled class, with probabilities
/// clamped by 1e-8 before the log.
pub fn task_loss_classification(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    let [rows, _cols] = rank2(logits, "task_loss_classification")?;
    if labels.len() != rows {
        return Err(contract(
            "task_loss_classification",
            format!("got {} labels for {} rows of logits", labels.len(), rows),
        ));
    }
    let probs = tape.softmax_t(logits, 1, 1.0)?;
    let picked = tape.select_columns(&probs, labels)?;
    let safe = tape.add_scalar(&picked, 1e-8)?;
    let logs = tape.log(&safe)?;
    let mean = tape.mean(&logs)?;
    tape.scale(&mean, -1.0)
}

/// Mean absolute error against scalar targets; predictions may be `[B]` or
/// `[B × 1]`.
pub fn task_loss_regression(
    tape: &mut Tape,
    preds: &Tensor,
    targets: &[f64],
) -> Result<Tensor, TensorError> {
    let flat = match *preds.shape() {
        [n] => {
            let _ = n;
            preds.clone()
        }
        [n, 1] => tape.reshape(preds, &[n])?,
        ref other => {
            return Err(contract(
                "task_loss_regression",
                format!("predictions must be [B] or [B x 1], got {other:?}"),
            ));
        }
    };
    if flat.numel() != targets.len() {
        return Err(contract(
            "task_loss_regression",
            format!("got {} targets for {} predictions", targets.len(), flat.numel()),
        ));
    }
    let t = Tensor::from_vec(vec![targets.len()], targets.to_vec())?;
    let diff = tape.sub(&flat, &t)?;
    let abs = tape.abs(&diff)?;
    tape.mean(&abs)
}

/// Decision-level transfer: `T^2 * mean_batch KL(p_t || p_s)` where both
/// distributions are tempered softmaxes of the logits and the teacher is
/// detached inside.
pub fn kt_decision(
    tape: &mut Tape,
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Tensor, TensorError> {
    let [rows, cols] = rank2(student_logits, "kt_decision")?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kt_decision",
            lhs: student_logits.shape().to_vec(),
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    let _ = rows;
    let teacher = teacher_logits.detach();
    let p_t = tape.softmax_t(&teacher, 1, temperature)?;
    let p_s = tape.softmax_t(student_logits, 1, temperature)?;
    let log_t = tape.log(&p_t)?;
    let log_s = tape.log(&p_s)?;
    let log_ratio = tape.sub(&log_t, &log_s)?;
    let contrib = tape.mul(&p_t, &log_ratio)?;
    // mean over all entries is (row KL sum, averaged over batch) / cols
    let mean = tape.mean(&contrib)?;
    tape.scale(&mean, cols as f64 * temperature * temperature)
}

/// Feature-level transfer: `mean_batch (1 - cos(student_row, teacher_row))`
/// after an optional learned projector maps the student feature to the
/// teacher width. The teacher is detached inside.
pub fn kt_feature(
    sess: &mut Session,
    student_feat: &Tensor,
    teacher_feat: &Tensor,
    projector: Option<&LinearLayer>,
) -> Result<Tensor, TensorError> {
    let [rows, s_width] = rank2(student_feat, "kt_feature")?;
    let [t_rows, t_width] = rank2(teacher_feat, "kt_feature")?;
    if rows != t_rows {
        return Err(TensorError::ShapeMismatch {
            op: "kt_feature",
            lhs: student_feat.shape().to_vec(),
            rhs: teacher_feat.shape().to_vec(),
        });
    }
    let student = match projector {
        Some(p) => p.forward(sess, student_feat)?,
        None => student_feat.clone(),
    };
    if student.shape()[1] != t_width {
        return Err(contract(
            "kt_feature",
            format!(
                "student width {} does not match teacher width {t_width}; \
                 a projector is required",
                s_width
            ),
        ));
    }
    let teacher = teacher_feat.detach();
    let tape = &mut sess.tape;
    let width = t_width as f64;
    let dot = {
        let prod = tape.mul(&student, &teacher)?;
        let m = tape.mean_pool(&prod, &[1])?;
        tape.scale(&m, width)?
    };
    let norm = |tape: &mut Tape, x: &Tensor| -> Result<Tensor, TensorError> {
        let sq = tape.mul(x, x)?;
        let m = tape.mean_pool(&sq, &[1])?;
        let sum = tape.scale(&m, width)?;
        // tiny floor keeps sqrt differentiable on an all-zero row
        let floored = tape.add_scalar(&sum, 1e-16)?;
        tape.sqrt(&floored)
    };
    let ns = norm(tape, &student)?;
    let nt = norm(tape, &teacher)?;
    let ns_safe = tape.add_scalar(&ns, 1e-8)?;
    let nt_safe = tape.add_scalar(&nt, 1e-8)?;
    let denom = tape.mul(&ns_safe, &nt_safe)?;
    let cos = tape.div(&dot, &denom)?;
    let neg = tape.scale(&cos, -1.0)?;
    let one_minus = tape.add_scalar(&neg, 1.0)?;
    tape.mean(&one_minus)
}

/// Attention-level transfer: mean over heads and rows of
/// `KL(teacher_row || student_row)` between row-stochastic attention maps,
/// with 1e-8 clamps inside the logs. Heads are paired one-to-one and the
/// teacher is detached inside.
pub fn kt_attention(
    tape: &mut Tape,
    student_heads: &[Tensor],
    teacher_heads: &[Tensor],
) -> Result<Tensor, TensorError> {
    if student_heads.is_empty() || student_heads.len() != teacher_heads.len() {
        return Err(contract(
            "kt_attention",
            format!(
                "head counts must match and be non-zero, got student {} teacher {}",
                student_heads.len(),
                teacher_heads.len()
            ),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for (s, t) in student_heads.iter().zip(teacher_heads) {
        let [_rows, cols] = rank2(s, "kt_attention")?;
        if s.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kt_attention",
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let teacher = t.detach();
        let t_safe = tape.add_scalar(&teacher, 1e-8)?;
        let s_safe = tape.add_scalar(s, 1e-8)?;
        let log_t = tape.log(&t_safe)?;
        let log_s = tape.log(&s_safe)?;
        let log_ratio = tape.sub(&log_t, &log_s)?;
        let contrib = tape.mul(&teacher, &log_ratio)?;
        let mean = tape.mean(&contrib)?;
        // mean over entries -> mean over rows of the row KL sum
        let kl = tape.scale(&mean, cols as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &kl)?,
            None => kl,
        });
    }
    let total = acc.expect("non-empty head list");
    tape.scale(&total, 1.0 / student_heads.len() as f64)
}

/// One named, weighted contribution to the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: String,
    /// Unweighted value of the term.
    pub value: f64,
    pub weight: f64,
}

/// The joint objective with its per-term breakdown. Terms whose weight is
/// zero (or whose transfer mode is disabled) are absent from both the tape
/// and the breakdown.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

fn task_loss(
    tape: &mut Tape,
    task: &TaskKind,
    preds: &Tensor,
    labels: &Labels,
) -> Result<Tensor, TensorError> {
    match (task, labels) {
        (TaskKind::Classification { .. }, Labels::Class(ls)) => {
            task_loss_classification(tape, preds, ls)
        }
        (TaskKind::Regression, Labels::Value(ts)) => task_loss_regression(tape, preds, ts),
        _ => Err(contract("task_loss", "label kind does not match the task")),
    }
}

/// Assemble `alpha * sum_i L_kt(i) + beta * sum_i L_task(i) + gamma *
/// L_task(mm)` over a forward pass. `names` and `kt_projectors` are indexed
/// like `outputs.uni`.
pub fn total_loss(
    sess: &mut Session,
    names: &[String],
    outputs: &BranchOutputs,
    labels: &Labels,
    weights: &LossWeights,
    kt_mode: KtMode,
    task: &TaskKind,
    kt_projectors: &[Option<LinearLayer>],
) -> Result<LossBreakdown, TensorError> {
    if names.len() != outputs.uni.len() || kt_projectors.len() != outputs.uni.len() {
        return Err(contract(
            "total_loss",
            "names, outputs, and projectors must cover the same modalities",
        ));
    }
    let mut terms = Vec::new();
    let mut total: Option<Tensor> = None;
    let mut push = |sess: &mut Session,
                    total: &mut Option<Tensor>,
                    name: String,
                    weight: f64,
                    term: Tensor|
     -> Result<(), TensorError> {
        let value = term.item()?;
        let weighted = sess.tape.scale(&term, weight)?;
        *total = Some(match total.take() {
            Some(t) => sess.tape.add(&t, &weighted)?,
            None => weighted,
        });
        terms.push(LossTerm { name, value, weight });
        Ok(())
    };

    let transfer_on = kt_mode != KtMode::None && weights.alpha != 0.0;
    if transfer_on {
        let mm = outputs.mm.as_ref().ok_or_else(|| {
            contract(
                "total_loss",
                "knowledge transfer requires the multimodal branch; it is absent \
                 in this forward mode",
            )
        })?;
        for (i, uni) in outputs.uni.iter().enumerate() {
            let term = match kt_mode {
                KtMode::Decision => {
                    kt_decision(&mut sess.tape, &uni.kt_pred, &mm.pred, weights.temperature)?
                }
                KtMode::Feature => {
                    kt_feature(sess, &uni.kt_feat, &mm.feat, kt_projectors[i].as_ref())?
                }
                KtMode::Attention => {
                    let student = uni.kt_attn.as_ref().ok_or_else(|| {
                        contract(
                            "total_loss",
                            format!(
                                "attention-level transfer needs a self-attention tail \
                                 on modality \"{}\"",
                                names[i]
                            ),
                        )
                    })?;
                    let teacher = mm.attn[i].as_ref().ok_or_else(|| {
                        contract(
                            "total_loss",
                            "attention-level transfer needs self-attention blocks in \
                             the multimodal branch",
                        )
                    })?;
                    if student.len() != teacher.len() {
                        return Err(contract(
                            "total_loss",
                            "attention maps must cover the same examples on both sides",
                        ));
                    }
                    let mut acc: Option<Tensor> = None;
                    for (s_heads, t_heads) in student.iter().zip(teacher) {
                        let kl = kt_attention(&mut sess.tape, s_heads, t_heads)?;
                        acc = Some(match acc {
                            Some(a) => sess.tape.add(&a, &kl)?,
                            None => kl,
                        });
                    }
                    let sum = acc
                        .ok_or_else(|| contract("total_loss", "empty batch in attention transfer"))?;
                    sess.tape.scale(&sum, 1.0 / student.len() as f64)?
                }
                KtMode::None => unreachable!("transfer_on excludes None"),
            };
            push(sess, &mut total, format!("kt.{}", names[i]), weights.alpha, term)?;
        }
    }

    if weights.beta != 0.0 {
        for (i, uni) in outputs.uni.iter().enumerate() {
            let term = task_loss(&mut sess.tape, task, &uni.pred, labels)?;
            push(sess, &mut total, format!("task.{}", names[i]), weights.beta, term)?;
        }
    }

    if weights.gamma != 0.0 {
        let mm = outputs.mm.as_ref().ok_or_else(|| {
            contract(
                "total_loss",
                "the multimodal task term requires the multimodal branch; it is \
                 absent in this forward mode",
            )
        })?;
        let term = task_loss(&mut sess.tape, task, &mm.pred, labels)?;
        push(sess, &mut total, "task.mm".to_string(), weights.gamma, term)?;
    }

    let total = match total {
        Some(t) => t,
        // all weights zero: a well-defined constant-zero objective
        None => sess.tape.leaf(vec![], vec![0.0])?.detach(),
    };
    Ok(LossBreakdown { total, terms })
}

fn rank2(t: &Tensor, op: &'static str) -> Result<[usize; 2], TensorError> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref other => Err(contract(op, format!("expected a rank-2 tensor, got {other:?}"))),
    }
}
