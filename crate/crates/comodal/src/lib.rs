//! Co-training of unimodal models with a multimodal transformer branch.
//!
//! A multi-branch model joins per-modality networks (stem, tail, task head)
//! through a cross-attention transformer branch that consumes tokens from the
//! shared stems. All branches train jointly under a weighted multi-task
//! objective with knowledge transfer from the multimodal branch to the
//! unimodal branches; at inference the multimodal branch is dropped and each
//! unimodal branch is extracted as a standalone model.
//!
//! The crate is organized as:
//!
//! - [`tensor`]: dense float64 tensors with reverse-mode autodiff on a tape
//! - [`nn`]: parameter store and layers (linear, conv1d, attention, transformer)
//! - [`model`]: the wired multi-branch graph, forward modes, and extraction
//! - [`objectives`]: task losses, knowledge-transfer losses, and their weighted sum
//! - [`trainer`]: Adam, synthetic multimodal data, metrics, training, ablations
//! - [`config`]: experiment configuration (JSON) with validation and defaults
//! - [`io`]: binary checkpoints and JSON-lines metrics emission

pub mod config;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tape, Tensor, TensorError};
