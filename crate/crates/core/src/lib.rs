//! Multilingual sentence representations learned through a many-to-one
//! sequence-to-sequence bottleneck model.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, Adam and checkpoints.
//! - [`tokenizer`]: a shared byte-pair-encoding vocabulary.
//! - [`model`]: Transformer encoder, max-pooled sentence embedding and a
//!   decoder that only sees the source through that embedding.
//! - [`training`]: label-smoothed cross-entropy, the cross-lingual KL
//!   consistency term, batching and the two-phase training loop.
//! - [`corpus`]: parallel corpus ingestion, cleaning and temperature sampling.
//! - [`mining`]: embedding stores, similarity search, margin scoring and
//!   bitext mining evaluation.

pub mod config;
pub mod corpus;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
pub mod trend;
