//! Energy-based semi-supervised anomaly detection.
//!
//! An encoder is pre-trained contrastively (optionally with shift
//! prediction), normal embeddings are summarized by spherical k-means
//! prototypes, and the encoder is fine-tuned with an energy loss that pushes
//! labeled anomalies away from the prototypes while keeping everything else
//! close. Samples are scored by the log-sum-exp of their prototype
//! similarities, ensembled over augmentations and shifts.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod mathcore;
pub mod objective;
pub mod optim;
pub mod pretrain;
pub mod prototypes;

pub use error::{ElsaError, Result};
