//! Dual enhanced attention for CTR prediction: combo-ID attention over gated
//! siamese codebooks, collapse-avoiding thresholded attention, and the fusion,
//! training, metric, and synthetic-data machinery around them.

pub mod codebook;
pub mod collapse;
pub mod combo;
pub mod config;
pub mod datagen;
pub mod error;
pub mod feature;
pub mod fusion;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tape;
pub mod train;

pub use config::{ExperimentConfig, VariantKind};
pub use error::{DeattError, Result};
pub use matrix::{set_threads, Matrix, MASK_THRESHOLD, SENTINEL};
