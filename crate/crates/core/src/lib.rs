//! Batch-difficulty-scaled Adam and the pieces needed to train and evaluate it:
//! baseline adaptive optimizers, imbalance-aware losses, a Bi-LSTM classifier
//! with hand-derived gradients, SMOTE/ENN/ADASYN resamplers, and the metrics
//! and significance tests used to compare optimizers across seeds.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod optimizers;
pub mod resampling;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng, GRADCHECK_FLOOR};
