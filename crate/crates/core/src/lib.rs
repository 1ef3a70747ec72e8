//! Chunk-wise KV-cache prefilling with prompt-conditioned selective
//! recomputation, on a small deterministic decoder.
//!
//! Pipeline: each context chunk is prefilled on its own with chunk-local
//! positions ([`kv_store`]); the chunk caches are concatenated, the prompt is
//! run over them under one of four positional layouts ([`positional`]), and
//! the context tokens receiving the most prompt attention are chosen
//! ([`selection`]). Those tokens are recomputed under the global causal
//! mask and written back ([`recompute`]). [`reorder`] optionally moves
//! informative chunks next to the prompt first, [`seqpar`] models the
//! latency of the scheme under sequence parallelism, and [`harness`] ties
//! everything into reproducible experiments.

pub mod error;
pub mod harness;
pub mod hash;
pub mod kv_store;
pub mod model;
pub mod positional;
pub mod recompute;
pub mod reorder;
pub mod rope;
pub mod selection;
pub mod seqpar;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    init_weights, ForwardRequest, ForwardResult, LayerKv, Mask, ModelConfig, TokenId, Weights,
};
pub use rope::apply_rope;
pub use tensor::{Matrix, Precision, Real};
