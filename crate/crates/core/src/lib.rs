//! Salient instance inference for multiple instance learning.
//!
//! Bags of instance embeddings are filtered against a key matrix of
//! representative negative instances, and the retained instances are
//! classified with a gated attention MIL model.

pub mod abmil;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod keylearn;
pub mod pipeline;
pub mod sii;
pub mod svd;
pub mod synth;

pub use error::{Error, Result};
