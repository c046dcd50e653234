//! Relational embeddings for few-shot classification: base features,
//! self-correlational representations, cross-correlational attention and the
//! episodic training and evaluation harness.

pub mod backbone;
pub mod cca;
pub mod episodic;
mod error;
pub mod graph;
pub mod model;
pub mod scr;

pub use error::{CoreError, Result};
