//! Parameterized layers over the tensor substrate.

mod attention;
mod conv;
mod linear;
mod param;
mod transformer;

pub use attention::{cross_attention, AttentionBlock};
pub use conv::Conv1dLayer;
pub use linear::{LayerNormParams, LinearLayer};
pub use param::{
    finite_diff_check_store, finite_diff_check_store_where, InitKind, ParamEntry, ParamId,
    ParamStore, Session,
};
pub use transformer::{sinusoidal_encoding, CrossDirection, EncoderBlock, TransformerStack};
