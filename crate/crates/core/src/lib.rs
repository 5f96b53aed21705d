//! Video facial expression recognition with a spatial-temporal model ensemble.
//!
//! Three models share a common structure: a frame-wise CNN backbone followed
//! by a head that is either a per-frame linear classifier, a 2-layer GRU, or
//! a transformer encoder with sinusoidal positional encoding. Temporal models
//! are trained many-to-many on fixed-length frame windows and run many-to-one
//! at inference (only the middle-frame output is kept). Per-model probability
//! sequences are combined by a weighted ensemble and scored with macro F1,
//! total accuracy, and the combined metric 0.67*F1 + 0.33*Acc.

pub mod config;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod labels;
pub mod math;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod training;

pub use error::{FerError, Result};
pub use labels::{ExpressionLabel, LabelMap, NUM_CLASSES};
