//! Multivariate time-series anomaly detection via masked self-imputation.
//!
//! The engine trains convolutional imputation models on self-generated
//! masked samples: a reconstruction head fills randomly masked points, a
//! bidirectional forecasting head fills contiguous masked segments.
//! Detection compares each window against its re-imputation — per-timestep
//! residuals for point anomalies, dynamic-time-warping distances for
//! sequence anomalies — with thresholds calibrated as the maximum score on
//! held-out validation data. A shift-scan localization pass refines the
//! start and end of flagged sequence anomalies.

pub mod dataset;
pub mod detection;
pub mod error;
pub mod imputer;
pub mod masking;
pub mod metrics;
pub mod persist;
pub mod scoring;
pub mod series;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
