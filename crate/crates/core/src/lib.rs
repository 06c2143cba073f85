//! Fine-grained open-vocabulary detection by decomposition.
//!
//! Class names are split into a coarse subject and attribute phrases
//! ([`vocabulary`]). A detector localizes subjects, with attribute
//! embeddings fused into its queries ([`cgod`]). Detected regions are then
//! scored against the full fine-grained names and the two confidences are
//! fused ([`fgad`]). [`training`] holds the two-stage training loop and
//! [`eval`] the benchmark protocol plus a seeded synthetic world.

pub mod autograd;
pub mod boxes;
pub mod cgod;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fgad;
pub mod llm;
pub mod model;
pub mod training;
pub mod tensor;
pub mod vocabulary;

pub use error::{Error, Result};
