//! Desk-scale siamese sentence encoders.
//!
//! The crate trains small transformer encoders to embed sentences so that
//! related sentences land near each other. Two texts run through one shared
//! encoder, a pooling head turns token states into a fixed vector, and
//! either a cosine regression or a three-way pair classifier supervises the
//! geometry. Everything runs on a hand-rolled reverse-mode tape over flat
//! `Vec<f32>`/`Vec<f64>` tensors; there is no BLAS and no threading, which
//! keeps runs bit-for-bit reproducible for a given seed.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: tensors, the autodiff tape, and finite-difference
//!   gradient checking.
//! - [`encoder`]: the transformer encoder, including cross-layer parameter
//!   sharing and factorized embeddings.
//! - [`pooling`]: CLS / mean / max / convolutional pooling heads.
//! - [`siamese`]: the two-tower model, its losses, and cosine scoring.
//! - [`training`]: Adam with linear warmup, plus the training loop.
//! - [`evaluation`]: Spearman and Pearson correlation reports.
//! - [`data`]: tokenization, corpus loaders, a synthetic similarity
//!   generator, and the checkpoint container.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod pooling;
pub mod rng;
pub mod siamese;
pub mod training;

pub use error::{Error, Result};
