//! Training loop, run modes, per-modality model selection, and the ablation
//! harness. The loop itself is single-threaded; `run_ablation` may fan
//! independent runs out to isolated worker threads (bounded by the
//! `COMODAL_THREADS` environment variable) and merges results by job index,
//! so results never depend on the thread count.

mod adam;
mod data;
mod metrics;
#[cfg(test)]
pub(crate) mod probe;

pub use adam::Adam;
pub use data::{generate_synthetic, Dataset, Split};
pub use metrics::{acc_7, accuracy, evaluate, mae, pearson, BranchMetrics, MetricsRecord};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, RunMode};
use crate::model::{build_model, forward_all, CoTrainModel, ForwardMode};
use crate::nn::Session;
use crate::objectives::{total_loss, LossTerm, LossWeights, TaskKind};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diverged: non-finite loss term \"{term}\" = {value} at epoch {epoch}")]
    Diverged { term: String, value: f64, epoch: usize },
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
}

/// Map a run mode onto the forward mode and effective loss weights:
/// `no_kt` keeps the full graph but zeroes the transfer weight; `no_mm`
/// drops the multimodal branch and with it the transfer and fused-task
/// terms.
pub fn effective(cfg: &ExperimentConfig) -> (ForwardMode, LossWeights) {
    let mut w = cfg.loss;
    let mode = match cfg.mode {
        RunMode::Cotrain => ForwardMode::Cotrain,
        RunMode::NoKt => {
            w.alpha = 0.0;
            ForwardMode::Cotrain
        }
        RunMode::FrozenSharedMm => ForwardMode::FrozenSharedMm,
        RunMode::NoMm => {
            w.alpha = 0.0;
            w.gamma = 0.0;
            ForwardMode::NoMm
        }
    };
    (mode, w)
}

/// A finished run: the trained model, the per-epoch record stream
/// (train-loss breakdown and validation metrics), and a parameter snapshot
/// per epoch for selection and checkpointing.
#[derive(Debug)]
pub struct TrainResult {
    pub model: CoTrainModel,
    pub records: Vec<MetricsRecord>,
    /// `epoch_params[e][id]` is parameter `id` after epoch `e`.
    pub epoch_params: Vec<Vec<Vec<f64>>>,
}

impl TrainResult {
    /// Load one epoch's snapshot back into the model.
    pub fn restore_epoch(&mut self, epoch: usize) -> Result<(), TensorError> {
        let snap = self.epoch_params.get(epoch).ok_or_else(|| TensorError::Contract {
            op: "restore_epoch",
            msg: format!("no snapshot for epoch {epoch}"),
        })?;
        for (id, data) in snap.iter().enumerate() {
            self.model.store.set_data(id, data.clone())?;
        }
        Ok(())
    }
}

fn snapshot(model: &CoTrainModel) -> Vec<Vec<f64>> {
    model.store.iter().map(|(_, e)| e.data.as_ref().clone()).collect()
}

/// Train for the configured epochs with Adam on the joint objective,
/// evaluating on the validation split every epoch. Deterministic in
/// `(config, seed)`. Aborts on a non-finite loss term, naming it.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainResult, TrainError> {
    let cfg = cfg.clone().validated()?;
    let (fmode, weights) = effective(&cfg);
    let mut model = build_model(&cfg)?;
    model.store.init_params(cfg.seed);
    let mut optimizer = Adam::new(&cfg.optimizer, &model.store);

    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    // a fixed offset keeps batch order decoupled from init/data streams
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let mut records = Vec::with_capacity(2 * cfg.epochs);
    let mut epoch_params = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut term_sums: Vec<LossTerm> = Vec::new();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.train.batch(chunk);
            let (grads, terms) = {
                let mut sess = Session::new(&model.store);
                let out = forward_all(&model, &mut sess, &batch, fmode)?;
                let breakdown = total_loss(
                    &mut sess,
                    &model.names,
                    &out,
                    &batch.labels,
                    &weights,
                    cfg.kt_mode,
                    &cfg.task,
                    &model.kt_projs,
                )?;
                for term in &breakdown.terms {
                    if !term.value.is_finite() {
                        return Err(TrainError::Diverged {
                            term: term.name.clone(),
                            value: term.value,
                            epoch,
                        });
                    }
                }
                if breakdown.terms.is_empty() {
                    // every weight is zero: nothing to optimize
                    (Vec::new(), Vec::new())
                } else {
                    let grads = sess.tape.backward(&breakdown.total)?;
                    (sess.collect_grads(&grads), breakdown.terms)
                }
            };
            if !grads.is_empty() {
                optimizer.step(&mut model.store, &grads)?;
            }
            if term_sums.is_empty() {
                term_sums = terms;
            } else {
                for (acc, t) in term_sums.iter_mut().zip(&terms) {
                    debug_assert_eq!(acc.name, t.name);
                    acc.value += t.value;
                }
            }
            batches += 1;
        }
        for t in &mut term_sums {
            t.value /= batches as f64;
        }
        records.push(MetricsRecord {
            epoch,
            split: "train".into(),
            branches: Vec::new(),
            loss_terms: term_sums,
        });
        let mut val = evaluate(&model, &dataset.val, &cfg.task)?;
        val.epoch = epoch;
        val.split = "val".into();
        records.push(val);
        epoch_params.push(snapshot(&model));
    }
    Ok(TrainResult { model, records, epoch_params })
}

/// Pick the epoch where `branch` scored best on validation (maximal
/// accuracy, or minimal MAE); ties go to the earlier epoch. Returns the
/// epoch index and a checkpoint tag.
pub fn select_best(records: &[MetricsRecord], branch: &str) -> Option<(usize, String)> {
    let mut best: Option<(usize, f64)> = None;
    for r in records.iter().filter(|r| r.split == "val") {
        if let Some(m) = r.branch(branch) {
            let score = m.selection_score();
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((r.epoch, score)),
            }
        }
    }
    best.map(|(e, _)| (e, format!("{branch}-epoch{e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    NoKt,
    FrozenSharedMm,
    AlphaSweep,
}

impl std::str::FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_kt" => Ok(AblationVariant::NoKt),
            "frozen_shared" | "frozen_shared_mm" => Ok(AblationVariant::FrozenSharedMm),
            "alpha_sweep" => Ok(AblationVariant::AlphaSweep),
            other => Err(format!(
                "unknown variant \"{other}\" (expected no_kt, frozen_shared, or alpha_sweep)"
            )),
        }
    }
}

/// The comparison table of an ablation: a header plus stringly-typed rows,
/// one per (arm, seed) and one mean row per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

struct Job {
    variant: String,
    alpha: f64,
    seed: u64,
    cfg: ExperimentConfig,
}

struct JobOutcome {
    variant: String,
    alpha: f64,
    seed: u64,
    /// Per-branch primary test metric at each branch's best-validation
    /// epoch, in branch order (modalities then `"mm"`).
    metrics: Vec<f64>,
}

fn run_job(job: &Job) -> Result<JobOutcome, TrainError> {
    let dataset = generate_synthetic(&job.cfg, job.cfg.seed)?;
    let mut result = train(&job.cfg, &dataset)?;
    let mut branch_names: Vec<String> = result.model.names.clone();
    if job.cfg.mode != RunMode::NoMm {
        branch_names.push("mm".to_string());
    }
    let mut metrics = Vec::with_capacity(branch_names.len());
    for branch in &branch_names {
        let (epoch, _) = select_best(&result.records, branch).ok_or_else(|| {
            TrainError::Tensor(TensorError::Contract {
                op: "run_ablation",
                msg: format!("no validation records for branch \"{branch}\""),
            })
        })?;
        result.restore_epoch(epoch)?;
        let record = evaluate(&result.model, &dataset.test, &job.cfg.task)?;
        let m = record.branch(branch).expect("evaluated branch is present");
        metrics.push(match m {
            BranchMetrics::Classification { accuracy } => *accuracy,
            BranchMetrics::Regression { mae, .. } => *mae,
        });
    }
    Ok(JobOutcome { variant: job.variant.clone(), alpha: job.alpha, seed: job.seed, metrics })
}

/// Worker-thread cap: `COMODAL_THREADS` if set, otherwise the machine's
/// available parallelism, always within `[1, jobs]`.
pub fn thread_cap(jobs: usize) -> usize {
    let configured = std::env::var("COMODAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()));
    configured.clamp(1, jobs.max(1))
}

fn run_jobs(jobs: &[Job]) -> Result<Vec<JobOutcome>, TrainError> {
    let cap = thread_cap(jobs.len());
    if cap <= 1 {
        return jobs.iter().map(run_job).collect();
    }
    let mut slots: Vec<Option<Result<JobOutcome, TrainError>>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(cap);
        for worker in 0..cap {
            let jobs = &jobs;
            handles.push(scope.spawn(move || {
                let mut mine = Vec::new();
                let mut i = worker;
                while i < jobs.len() {
                    mine.push((i, run_job(&jobs[i])));
                    i += cap;
                }
                mine
            }));
        }
        for handle in handles {
            for (i, outcome) in handle.join().expect("ablation worker panicked") {
                slots[i] = Some(outcome);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

/// Run the matched experiments of one ablation over the given seeds and
/// tabulate per-seed and mean test metrics per branch. Arms:
/// - `no_kt`: cotraining vs. the zeroed transfer weight;
/// - `frozen_shared`: cotraining vs. stems frozen against multimodal losses;
/// - `alpha_sweep`: transfer weight in {1, 5, 10, 20} with the task weights
///   fixed to 1.
pub fn run_ablation(
    base: &ExperimentConfig,
    variant: AblationVariant,
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config(ConfigError::Invalid(
            "run_ablation needs at least one seed".into(),
        )));
    }
    let base = base.clone().validated()?;
    let mut arms: Vec<(String, ExperimentConfig)> = Vec::new();
    match variant {
        AblationVariant::NoKt => {
            let mut cotrain = base.clone();
            cotrain.mode = RunMode::Cotrain;
            arms.push(("cotrain".into(), cotrain));
            let mut no_kt = base.clone();
            no_kt.mode = RunMode::NoKt;
            arms.push(("no_kt".into(), no_kt));
        }
        AblationVariant::FrozenSharedMm => {
            let mut cotrain = base.clone();
            cotrain.mode = RunMode::Cotrain;
            arms.push(("cotrain".into(), cotrain));
            let mut frozen = base.clone();
            frozen.mode = RunMode::FrozenSharedMm;
            arms.push(("frozen_shared_mm".into(), frozen));
        }
        AblationVariant::AlphaSweep => {
            for alpha in [1.0, 5.0, 10.0, 20.0] {
                let mut cfg = base.clone();
                cfg.mode = RunMode::Cotrain;
                cfg.loss.alpha = alpha;
                cfg.loss.beta = 1.0;
                cfg.loss.gamma = 1.0;
                arms.push(("alpha_sweep".into(), cfg));
            }
        }
    }

    let mut jobs = Vec::with_capacity(arms.len() * seeds.len());
    for (label, cfg) in &arms {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            jobs.push(Job { variant: label.clone(), alpha: cfg.loss.alpha, seed, cfg });
        }
    }
    let outcomes = run_jobs(&jobs)?;

    let metric_prefix = match base.task {
        TaskKind::Classification { .. } => "test_acc",
        TaskKind::Regression => "test_mae",
    };
    let mut branch_names: Vec<String> = base.modality_names();
    branch_names.push("mm".to_string());
    let mut header = vec!["variant".to_string(), "alpha".to_string(), "seed".to_string()];
    header.extend(branch_names.iter().map(|b| format!("{metric_prefix}_{b}")));

    let mut rows = Vec::new();
    for chunk in outcomes.chunks(seeds.len()) {
        for o in chunk {
            let mut row = vec![o.variant.clone(), format!("{}", o.alpha), format!("{}", o.seed)];
            row.extend(o.metrics.iter().map(|v| format!("{v:.6}")));
            rows.push(row);
        }
        let k = chunk[0].metrics.len();
        let mut means = vec![0.0; k];
        for o in chunk {
            for (m, v) in means.iter_mut().zip(&o.metrics) {
                *m += v;
            }
        }
        let mut row = vec![
            chunk[0].variant.clone(),
            format!("{}", chunk[0].alpha),
            "mean".to_string(),
        ];
        row.extend(means.iter().map(|m| format!("{:.6}", m / chunk.len() as f64)));
        rows.push(row);
    }
    Ok(AblationTable { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Labels;
    use crate::objectives::KtMode;

    fn tiny_cfg(extra: &str) -> ExperimentConfig {
        let json = format!(
            r#"{{"modalities": [
                {{"name": "a", "channels": 2, "length": 4, "view": {{"noise_sigma": 0.3}}}},
                {{"name": "b", "channels": 2, "length": 4, "view": {{"noise_sigma": 0.3}}}}
            ],
            "mm": {{"d_model": 4, "heads": 1, "cross_depth": 1, "self_depth": 1,
                    "ff_hidden": 4, "positional": true}},
            "task": {{"kind": "classification", "classes": 3}},
            "data": {{"latent_dim": 4, "train": 12, "val": 6, "test": 6}},
            "epochs": 2, "batch_size": 6, "seed": 5{extra}}}"#
        );
        serde_json::from_str::<ExperimentConfig>(&json).unwrap().validated().unwrap()
    }

    fn final_params(result: &TrainResult) -> &Vec<Vec<f64>> {
        result.epoch_params.last().unwrap()
    }

    fn assert_params_bit_equal(a: &[Vec<f64>], b: &[Vec<f64>]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.len(), y.len());
            for (p, q) in x.iter().zip(y) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn same_config_and_seed_train_bit_identically() {
        let cfg = tiny_cfg("");
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        let r1 = train(&cfg, &data).unwrap();
        let r2 = train(&cfg, &data).unwrap();
        assert_params_bit_equal(final_params(&r1), final_params(&r2));
        assert_eq!(r1.records.len(), r2.records.len());
        for (a, b) in r1.records.iter().zip(&r2.records) {
            assert_eq!(a.branches, b.branches);
            assert_eq!(a.loss_terms, b.loss_terms);
        }
    }

    #[test]
    fn no_kt_mode_equals_zero_alpha_cotraining_exactly() {
        let mut no_kt = tiny_cfg("");
        no_kt.mode = RunMode::NoKt;
        let mut zero_alpha = tiny_cfg("");
        zero_alpha.loss.alpha = 0.0;

        let data = generate_synthetic(&no_kt, no_kt.seed).unwrap();
        let r1 = train(&no_kt, &data).unwrap();
        let r2 = train(&zero_alpha, &data).unwrap();
        assert_params_bit_equal(final_params(&r1), final_params(&r2));
    }

    #[test]
    fn frozen_shared_mode_with_only_the_fused_loss_never_moves_stems_or_tails() {
        let mut cfg = tiny_cfg(r#", "loss": {"alpha": 0.0, "beta": 0.0, "gamma": 1.0}"#);
        cfg.mode = RunMode::FrozenSharedMm;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();

        let mut model = build_model(&cfg).unwrap();
        model.store.init_params(cfg.seed);
        let init: Vec<Vec<f64>> = model.store.iter().map(|(_, e)| e.data.as_ref().clone()).collect();

        let result = train(&cfg, &data).unwrap();
        let trained = final_params(&result);
        let mut mm_moved = false;
        for (id, entry) in result.model.store.iter() {
            let unchanged = init[id]
                .iter()
                .zip(&trained[id])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if entry.name.starts_with("mm.") {
                mm_moved |= !unchanged;
            } else {
                assert!(unchanged, "{} changed across training", entry.name);
            }
        }
        assert!(mm_moved, "the fused branch itself must train");
    }

    #[test]
    fn one_epoch_of_descent_reduces_the_training_loss() {
        let mut cfg = tiny_cfg("");
        cfg.epochs = 6;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        let result = train(&cfg, &data).unwrap();
        let totals: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.loss_terms.iter().map(|t| t.weight * t.value).sum())
            .collect();
        assert_eq!(totals.len(), 6);
        assert!(
            totals.last().unwrap() < totals.first().unwrap(),
            "loss went {totals:?}"
        );
    }

    #[test]
    fn select_best_maximizes_accuracy_and_breaks_ties_early() {
        let rec = |epoch: usize, acc_a: f64, acc_b: f64| MetricsRecord {
            epoch,
            split: "val".into(),
            branches: vec![
                ("a".into(), BranchMetrics::Classification { accuracy: acc_a }),
                ("b".into(), BranchMetrics::Classification { accuracy: acc_b }),
            ],
            loss_terms: Vec::new(),
        };
        let records = vec![
            rec(0, 0.50, 0.20),
            rec(1, 0.70, 0.40),
            rec(2, 0.70, 0.90),
            rec(3, 0.60, 0.90),
        ];
        // branch a: tie between epochs 1 and 2 -> earlier
        assert_eq!(select_best(&records, "a"), Some((1, "a-epoch1".into())));
        // branch b selected independently
        assert_eq!(select_best(&records, "b"), Some((2, "b-epoch2".into())));
        assert_eq!(select_best(&records, "zz"), None);
    }

    #[test]
    fn select_best_minimizes_mae_for_regression() {
        let rec = |epoch: usize, mae: f64| MetricsRecord {
            epoch,
            split: "val".into(),
            branches: vec![(
                "a".into(),
                BranchMetrics::Regression { mae, pearson: 0.0, acc_7: 0.0 },
            )],
            loss_terms: Vec::new(),
        };
        let records = vec![rec(0, 1.0), rec(1, 0.4), rec(2, 0.8)];
        assert_eq!(select_best(&records, "a"), Some((1, "a-epoch1".into())));
    }

    #[test]
    fn divergence_aborts_with_the_offending_term_named() {
        // a huge step size blows the fused branch up within two epochs
        let mut cfg = tiny_cfg(r#", "optimizer": {"step_size": 1e4}"#);
        cfg.epochs = 4;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        match train(&cfg, &data) {
            Err(TrainError::Diverged { term, .. }) => {
                assert!(term.starts_with("task.") || term.starts_with("kt."), "{term}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn alpha_sweep_table_has_the_protocol_shape() {
        let cfg = tiny_cfg("");
        let table = run_ablation(&cfg, AblationVariant::AlphaSweep, &[1, 2]).unwrap();
        assert_eq!(
            table.header,
            vec!["variant", "alpha", "seed", "test_acc_a", "test_acc_b", "test_acc_mm"]
        );
        // 4 alphas x (2 seeds + mean)
        assert_eq!(table.rows.len(), 12);
        let alphas: Vec<&str> = table
            .rows
            .iter()
            .filter(|r| r[2] == "mean")
            .map(|r| r[1].as_str())
            .collect();
        assert_eq!(alphas, vec!["1", "5", "10", "20"]);
        for row in &table.rows {
            assert_eq!(row.len(), table.header.len());
        }
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("variant,alpha,seed,"));
    }

    #[test]
    fn matched_variant_tables_pair_cotrain_with_the_variant() {
        let cfg = tiny_cfg("");
        let table = run_ablation(&cfg, AblationVariant::NoKt, &[3]).unwrap();
        let variants: Vec<&str> = table.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(variants, vec!["cotrain", "cotrain", "no_kt", "no_kt"]);
    }

    #[test]
    fn regression_task_trains_and_evaluates() {
        let mut cfg = tiny_cfg(r#", "kt_mode": "feature""#);
        cfg.task = TaskKind::Regression;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        assert!(matches!(data.train.labels, Labels::Value(_)));
        let result = train(&cfg, &data).unwrap();
        let record = evaluate(&result.model, &data.test, &cfg.task).unwrap();
        let m = record.branch("a").unwrap();
        match m {
            BranchMetrics::Regression { mae, pearson, acc_7 } => {
                assert!(mae.is_finite() && pearson.is_finite() && acc_7.is_finite());
                assert!((0.0..=1.0).contains(acc_7));
            }
            _ => panic!("regression metrics expected"),
        }
        // decision transfer on regression is rejected upstream
        let mut bad = cfg.clone();
        bad.kt_mode = KtMode::Decision;
        assert!(bad.validated().is_err());
    }
}
