//! Experiment configuration: JSON-backed, strictly validated, with defaults
//! chosen so a minimal two-modality file runs out of the box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{KtMode, LossWeights, TaskKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// One 1-D convolution stage (followed by ReLU) in a stem or tail.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvStage {
    fn default() -> Self {
        ConvStage {
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

/// Synthetic view of the shared latent for one modality.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ViewSpec {
    /// Observation noise standard deviation added after the nonlinearity.
    pub noise_sigma: f64,
    /// Half-open window `[start, end)` of latent coordinates this modality
    /// observes; `None` sees the full latent.
    pub latent_window: Option<[usize; 2]>,
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec {
            noise_sigma: 0.15,
            latent_window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    /// Channels of the raw `[channels × length]` input grid.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Temporal length of the raw input grid.
    #[serde(default = "default_length")]
    pub length: usize,
    /// Shared stem stages (also feed the multimodal branch).
    #[serde(default = "default_stem")]
    pub stem: Vec<ConvStage>,
    /// Unimodal-private convolution stages after the attach point. The
    /// default single wide stage gives each student private capacity to
    /// absorb transfer without widening the shared stem.
    #[serde(default = "default_tail_conv")]
    pub tail_conv: Vec<ConvStage>,
    /// Hidden widths of the linear tail after pooling. Empty means one
    /// hidden layer sized to the multimodal feature width, which lets
    /// feature-level transfer compare features without a projector.
    #[serde(default)]
    pub tail_hidden: Vec<usize>,
    /// Insert a self-attention block over the tail tokens; required for
    /// attention-level knowledge transfer.
    #[serde(default)]
    pub self_attention_tail: bool,
    #[serde(default)]
    pub view: ViewSpec,
}

fn default_channels() -> usize {
    6
}
fn default_length() -> usize {
    12
}
fn default_stem() -> Vec<ConvStage> {
    vec![ConvStage::default()]
}
fn default_tail_conv() -> Vec<ConvStage> {
    vec![ConvStage { out_channels: 24, ..ConvStage::default() }]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MmConfig {
    /// Token width inside the multimodal transformer.
    pub d_model: usize,
    pub heads: usize,
    /// Blocks per cross-modal direction.
    pub cross_depth: usize,
    /// Self-attention blocks per modality after fusion; the final block's
    /// probabilities are the teacher side of attention-level transfer.
    pub self_depth: usize,
    pub ff_hidden: usize,
    /// Add sinusoidal positional encoding to tokens at branch entry.
    pub positional: bool,
}

impl Default for MmConfig {
    fn default() -> Self {
        MmConfig {
            d_model: 8,
            heads: 1,
            cross_depth: 1,
            self_depth: 1,
            ff_hidden: 16,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dimension of the latent every modality view derives from.
    pub latent_dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Probability that a training example's class label is replaced by a
    /// uniformly drawn different class. Val and test labels stay clean, so
    /// reported metrics measure recovery of the true rule.
    pub label_flip: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            latent_dim: 8,
            train: 2048,
            val: 256,
            test: 1024,
            label_flip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Cotrain,
    NoMm,
    FrozenSharedMm,
    NoKt,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modalities: Vec<ModalityConfig>,
    #[serde(default)]
    pub mm: MmConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub kt_mode: KtMode,
    #[serde(default)]
    pub task: TaskKind,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub data: DataConfig,
    /// Block knowledge-transfer gradients at the stem/tail boundary instead
    /// of letting them reach the shared stem. On by default: transfer then
    /// shapes each student's private tail without perturbing the stems the
    /// fused branch reads, which protects fused accuracy.
    #[serde(default = "default_kt_stop")]
    pub kt_stop_at_stem: bool,
}

fn default_epochs() -> usize {
    40
}
fn default_kt_stop() -> bool {
    true
}
fn default_batch_size() -> usize {
    16
}

impl ExperimentConfig {
    /// The builtin two-modality classification experiment: two noisy views of
    /// partially overlapping latent windows, so each modality alone misses
    /// information the other holds and fusion pays. Besides the field
    /// defaults it makes two explicit choices, both calibrated on this task:
    /// a larger optimizer step (the small unimodal nets underfit at the
    /// conservative default) and train-split label noise (soft fused-branch
    /// targets then carry signal the corrupted hard labels lack, which is
    /// what makes transfer worth measuring).
    pub fn default_two_modality() -> Self {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"modalities": [
                {"name": "rgb",   "view": {"latent_window": [0, 6]}},
                {"name": "depth", "view": {"latent_window": [1, 8]}}
            ],
            "optimizer": {"step_size": 0.003},
            "data": {"label_flip": 0.25}}"#,
        )
        .expect("builtin default config parses");
        cfg.validated().expect("builtin default config validates")
    }

    /// Apply width defaults that depend on sibling fields, then check every
    /// invariant. Call after deserializing.
    pub fn validated(mut self) -> Result<Self, ConfigError> {
        let m = self.modalities.len();
        if m < 2 {
            return Err(invalid(format!(
                "modalities: need at least 2 for cross-modal fusion, got {m}"
            )));
        }
        for i in 0..m {
            for j in i + 1..m {
                if self.modalities[i].name == self.modalities[j].name {
                    return Err(invalid(format!(
                        "modalities: duplicate name \"{}\"",
                        self.modalities[i].name
                    )));
                }
            }
        }
        // default tail width = multimodal feature width (M·d_model) so
        // feature transfer needs no projector
        let mm_feat_width = m * self.mm.d_model;
        for mc in &mut self.modalities {
            if mc.tail_hidden.is_empty() {
                mc.tail_hidden = vec![mm_feat_width];
            }
        }
        for mc in &self.modalities {
            if mc.name.is_empty() {
                return Err(invalid("modalities: name must be non-empty"));
            }
            if mc.channels == 0 || mc.length == 0 {
                return Err(invalid(format!(
                    "modality \"{}\": channels and length must be positive",
                    mc.name
                )));
            }
            if mc.stem.is_empty() {
                return Err(invalid(format!(
                    "modality \"{}\": stem needs at least one stage",
                    mc.name
                )));
            }
            for (label, stages) in [("stem", &mc.stem), ("tail_conv", &mc.tail_conv)] {
                for (i, s) in stages.iter().enumerate() {
                    if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                        return Err(invalid(format!(
                            "modality \"{}\": {label}[{i}] needs positive out_channels, kernel, stride",
                            mc.name
                        )));
                    }
                }
            }
            if mc.tail_hidden.iter().any(|w| *w == 0) {
                return Err(invalid(format!(
                    "modality \"{}\": tail_hidden widths must be positive",
                    mc.name
                )));
            }
            if !(mc.view.noise_sigma >= 0.0) {
                return Err(invalid(format!(
                    "modality \"{}\": view.noise_sigma must be >= 0",
                    mc.name
                )));
            }
            if let Some([start, end]) = mc.view.latent_window {
                if start >= end || end > self.data.latent_dim {
                    return Err(invalid(format!(
                        "modality \"{}\": view.latent_window [{start}, {end}) must be non-empty and within latent_dim {}",
                        mc.name, self.data.latent_dim
                    )));
                }
            }
            // every stem stage must leave at least one position
            let mut len = mc.length;
            for (i, s) in mc.stem.iter().chain(&mc.tail_conv).enumerate() {
                if len + 2 * s.padding < s.kernel {
                    return Err(invalid(format!(
                        "modality \"{}\": conv stage {i} kernel {} exceeds padded length {}",
                        mc.name,
                        s.kernel,
                        len + 2 * s.padding
                    )));
                }
                len = (len + 2 * s.padding - s.kernel) / s.stride + 1;
            }
        }
        if self.mm.d_model == 0 || self.mm.ff_hidden == 0 {
            return Err(invalid("mm: d_model and ff_hidden must be positive"));
        }
        if self.mm.heads == 0 || self.mm.d_model % self.mm.heads != 0 {
            return Err(invalid(format!(
                "mm: d_model {} must be divisible by heads {}",
                self.mm.d_model, self.mm.heads
            )));
        }
        if self.mm.cross_depth == 0 {
            return Err(invalid("mm: cross_depth must be >= 1"));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0 && self.loss.gamma >= 0.0) {
            return Err(invalid("loss: alpha, beta, gamma must be >= 0"));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(invalid(format!(
                "loss: temperature must be > 0, got {}",
                self.loss.temperature
            )));
        }
        match self.task {
            TaskKind::Classification { classes } if classes < 2 => {
                return Err(invalid(format!(
                    "task: classification needs >= 2 classes, got {classes}"
                )));
            }
            _ => {}
        }
        if self.kt_mode == KtMode::Decision && matches!(self.task, TaskKind::Regression) {
            return Err(invalid(
                "kt_mode: decision-level transfer distills class probabilities and \
                 requires a classification task",
            ));
        }
        if self.kt_mode == KtMode::Attention {
            if self.mm.self_depth == 0 {
                return Err(invalid(
                    "kt_mode: attention-level transfer needs mm.self_depth >= 1 \
                     to expose teacher attention",
                ));
            }
            if let Some(mc) = self.modalities.iter().find(|mc| !mc.self_attention_tail) {
                return Err(invalid(format!(
                    "kt_mode: attention-level transfer needs self_attention_tail on \
                     every modality (missing on \"{}\")",
                    mc.name
                )));
            }
            if self.mm.heads != 1 {
                return Err(invalid(
                    "kt_mode: attention-level transfer pairs teacher and student \
                     heads one-to-one; the single-head student requires mm.heads = 1",
                ));
            }
        }
        if !(self.optimizer.step_size > 0.0) {
            return Err(invalid("optimizer: step_size must be > 0"));
        }
        for (name, b) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("optimizer: {name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.optimizer.epsilon > 0.0) {
            return Err(invalid("optimizer: epsilon must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be >= 1"));
        }
        if self.data.latent_dim == 0 {
            return Err(invalid("data: latent_dim must be >= 1"));
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(invalid("data: train, val, test sizes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.data.label_flip) {
            return Err(invalid(format!(
                "data: label_flip must be in [0, 1), got {}",
                self.data.label_flip
            )));
        }
        if self.data.label_flip > 0.0 && matches!(self.task, TaskKind::Regression) {
            return Err(invalid(
                "data: label_flip corrupts class labels and requires a classification task",
            ));
        }
        Ok(self)
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|mc| mc.name.clone()).collect()
    }
}

/// Read, deserialize, and validate a config file. Unknown keys are errors
/// naming the key; invariant violations name the offending field.
pub fn parse_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.validated()
}

/// Human-readable reference of every config key and its default, generated
/// from the same defaults the parser applies.
pub fn config_reference() -> String {
    let default = ExperimentConfig::default_two_modality();
    let doc = serde_json::to_string_pretty(&default).expect("config serializes");
    format!(
        "All keys are optional except `modalities` (>= 2 entries, unique names).\n\
         Unknown keys are rejected. Defaults (shown via the builtin two-modality\n\
         experiment; empty `tail_hidden` defaults to one layer of width\n\
         modality_count * mm.d_model):\n\n{doc}\n"
    )
}
