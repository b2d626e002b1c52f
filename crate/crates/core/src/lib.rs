//! # tsa
//!
//! Transformer-based sentiment classification at desk scale.
//!
//! ```text
//! tokens → embeddings (hash | static table | contextual layer mix)
//!        → input projection
//!        → [encoder layer × N]   multi-head self-attention with relative
//!                                position keys/values, FFN, post-norm
//!        → bi-attention fusion   [X; X − C; X ⊙ C] → d_model
//!        → LSTM (state-frozen over padding)
//!        → pooling               self-attentive | mean | both
//!        → FFN head → softmax
//! ```
//!
//! All numerics run on the small reverse-mode engine in [`numerics`].

pub mod classifier;
pub mod cli;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod numerics;

pub use error::{Result, TsaError};
