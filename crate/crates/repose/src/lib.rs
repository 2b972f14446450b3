//! Two-stage person image synthesis and editing.
//!
//! Stage 1 generates a semantic parsing map aligned with a target pose from
//! the source pose, target pose, and source parsing map. Stage 2 renders the
//! final image by encoding per-region styles from the source image, applying
//! per-region and spatial-aware normalization to a target-aligned context
//! feature, and decoding. Because shape (the parsing map) and style (the
//! per-region code table) are separate inputs to stage 2, the model supports
//! texture transfer, texture interpolation, and region editing directly.
//!
//! Everything runs on a self-contained f64 autodiff substrate ([`tensor`]),
//! so training and inference are deterministic, CPU-only, and desk-scale.
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release -p repose --example make_fixtures
//! cargo run --release -p repose --example train_stage1
//! cargo run --release -p repose --example pose_transfer
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edit;
pub mod extractor;
pub mod imagegen;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod norm;
pub mod parsing;
pub mod rng;
pub mod style;
pub mod tensor;
pub mod train;

/// Errors surfaced by model forward passes.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Extractor(#[from] extractor::ExtractorError),
}
