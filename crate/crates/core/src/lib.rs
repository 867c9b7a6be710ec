//! Layer-wise out-of-distribution detection.
//!
//! Per-layer anomaly scores (Mahalanobis, IRW depth, maximum cosine similarity)
//! are computed for every layer and class of an embedding trace, giving an
//! `L x C` score matrix per input. The matrices are then reduced to a single
//! anomaly score, either with a plain statistic over layers or with an anomaly
//! detector fitted on the score matrices of the training set, followed by a
//! minimum over classes and a threshold.
//!
//! Every score in this crate follows one orientation: higher means more
//! anomalous.

pub mod aggregation;
pub mod baselines;
pub mod detectors;
pub mod error;
pub mod cli;
pub mod matrix;
pub mod metrics;
pub mod scorers;
pub mod trace;

pub use error::{Error, Result};
