//! Weakly-supervised representation learning and retrieval post-processing
//! for instance-level product search.
//!
//! The crate covers the full pipeline: mining pseudo-attributes from product
//! titles, soft multi-label training objectives, a small residual-MLP encoder
//! trainer, embedding post-processing (whitening, L2 normalization, ensemble
//! concatenation), exact top-N search with k-reciprocal re-ranking, MAR@k
//! evaluation, and a seeded synthetic benchmark that ties it all together.
//!
//! Start with the runnable examples (`cargo run --example full_pipeline`) or
//! the `weakrank` binary, which exposes each stage as a subcommand.

pub mod attrs;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod search;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
