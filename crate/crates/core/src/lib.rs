//! Zero-shot recognition with a semantics-preserving adversarial embedding:
//! synthetic attribute datasets, the embedder/encoder/decoder/critic maps,
//! their losses and training loop, generalized zero-shot evaluation and the
//! reconstruction-architecture ablations.

pub mod ablations;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod spaces;
pub mod trainer;

pub use error::{Error, Result};
