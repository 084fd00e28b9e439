//! Spatial relation inference from image captions.
//!
//! This crate builds a dataset that links (subject, relation, object)
//! concept triplets to tokens of free-text image captions via word-embedding
//! similarity, then trains and evaluates a small regression network that
//! predicts the location and size of the object's bounding box given the
//! caption text and the subject's bounding box. No image pixels are used.
//!
//! The pieces:
//!
//! - [`embeddings`]: word-vector table (GloVe-format loader, cosine similarity)
//! - [`geometry`]: center/half-extent boxes, normalization, mirroring, IoU
//! - [`alignment`]: triplet-to-caption token alignment and dataset construction
//! - [`nncore`]: dense/LSTM layers, MSE loss, RMSprop, with analytic gradients
//! - [`encoders`]: caption encoders (average, BiLSTM, precomputed vectors)
//! - [`model`]: the full regression network and its input-ablation variants
//! - [`metrics`]: above/below accuracy and F1, Pearson r, R², mean IoU
//! - [`training`]: k-fold cross-validation harness and gradient checking
//! - [`cli`]: the `scenelay` command-line entry points

pub mod alignment;
pub mod cli;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nncore;
pub mod training;

pub use embeddings::EmbeddingTable;
pub use error::{Error, Result};
pub use geometry::{BBox, PixelBox};
