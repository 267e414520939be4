//! Conditional DC-GAN toolkit: a small reverse-mode tensor engine, the
//! layers and networks built on it, word2vec ingestion, emoji datasets,
//! and the adversarial training loop.

pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod gan;
pub mod gradsuite;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tape, Tensor, Var};
