//! Word-level typography control for a small flow-matching text-to-image model.
//!
//! The crate bundles a glyph synthesiser with exact per-word masks, a
//! miniature joint-attention flow transformer, low-rank adapters with
//! region-aware losses, a trainer, and an evaluation harness.

pub mod ablation;
pub mod autograd;
pub mod error;
pub mod evalharness;
pub mod exec;
pub mod flowmodel;
pub mod glyphforge;
pub mod grounding;
pub mod imageio;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod wordcon;

pub use error::{Error, Result};
pub use exec::ExecMode;
