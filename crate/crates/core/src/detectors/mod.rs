//! Anomaly detectors operating in score space.
//!
//! Each detector is fitted on a stack of layer-score vectors and returns a
//! score where higher means more anomalous.

mod isolation_forest;
mod lof;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use isolation_forest::{
    average_path_length, IsolationForestModel, IsolationTree, Node, DEFAULT_MAX_SUBSAMPLE,
    DEFAULT_N_TREES,
};
pub use lof::{LofModel, DEFAULT_K, REACH_FLOOR};

use crate::error::{Error, Result};
use crate::matrix::Rows;
use crate::scorers::{CosineBank, IrwModel, MahalanobisModel, DEFAULT_N_PROJ, DEFAULT_SHRINKAGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "if")]
    IsolationForest,
    #[serde(rename = "lof")]
    Lof,
    #[serde(rename = "agg_maha")]
    Mahalanobis,
    #[serde(rename = "agg_irw")]
    Irw,
    #[serde(rename = "agg_cosine")]
    Cosine,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::IsolationForest => "if",
            DetectorKind::Lof => "lof",
            DetectorKind::Mahalanobis => "agg_maha",
            DetectorKind::Irw => "agg_irw",
            DetectorKind::Cosine => "agg_cosine",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "if" => DetectorKind::IsolationForest,
            "lof" => DetectorKind::Lof,
            "agg_maha" => DetectorKind::Mahalanobis,
            "agg_irw" => DetectorKind::Irw,
            "agg_cosine" => DetectorKind::Cosine,
            other => return Err(Error::InvalidArgument(format!("unknown detector '{other}'"))),
        })
    }
}

/// Hyper-parameters for every detector kind; each kind reads its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    /// `None` means `min(256, n)`.
    #[serde(default)]
    pub subsample: Option<usize>,
    /// Clamped to `n - 1`.
    #[serde(default = "default_k")]
    pub lof_k: usize,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    #[serde(default = "default_n_proj")]
    pub n_proj: usize,
}

fn default_n_trees() -> usize {
    DEFAULT_N_TREES
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}
fn default_n_proj() -> usize {
    DEFAULT_N_PROJ
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_N_TREES,
            subsample: None,
            lof_k: DEFAULT_K,
            shrinkage: DEFAULT_SHRINKAGE,
            n_proj: DEFAULT_N_PROJ,
        }
    }
}

/// A fitted score-space detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model")]
pub enum Detector {
    #[serde(rename = "if")]
    IsolationForest(IsolationForestModel),
    #[serde(rename = "lof")]
    Lof(LofModel),
    #[serde(rename = "agg_maha")]
    Mahalanobis(MahalanobisModel),
    #[serde(rename = "agg_irw")]
    Irw(IrwModel),
    #[serde(rename = "agg_cosine")]
    Cosine(CosineBank),
}

impl Detector {
    pub fn fit(kind: DetectorKind, data: &Rows, params: &DetectorParams, seed: u64) -> Result<Self> {
        let n = data.n_rows();
        if n < 2 {
            return Err(Error::Data(format!(
                "detector needs at least 2 reference rows, got {n}"
            )));
        }
        Ok(match kind {
            DetectorKind::IsolationForest => {
                let psi = params.subsample.unwrap_or(DEFAULT_MAX_SUBSAMPLE).min(n);
                Detector::IsolationForest(IsolationForestModel::fit(data, params.n_trees, psi, seed)?)
            }
            DetectorKind::Lof => Detector::Lof(LofModel::fit(data, params.lof_k.min(n - 1))?),
            DetectorKind::Mahalanobis => Detector::Mahalanobis(
                MahalanobisModel::fit(data, params.shrinkage).map_err(|reason| {
                    Error::Numerical {
                        layer: 0,
                        class: 0,
                        reason: format!("score-space Mahalanobis: {reason}"),
                    }
                })?,
            ),
            DetectorKind::Irw => {
                Detector::Irw(IrwModel::fit(std::slice::from_ref(data), params.n_proj, seed)?)
            }
            DetectorKind::Cosine => Detector::Cosine(CosineBank::fit(data)?),
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::IsolationForest(_) => DetectorKind::IsolationForest,
            Detector::Lof(_) => DetectorKind::Lof,
            Detector::Mahalanobis(_) => DetectorKind::Mahalanobis,
            Detector::Irw(_) => DetectorKind::Irw,
            Detector::Cosine(_) => DetectorKind::Cosine,
        }
    }

    pub fn score(&self, v: &[f64]) -> Result<f64> {
        match self {
            Detector::IsolationForest(m) => m.score(v),
            Detector::Lof(m) => m.score(v),
            Detector::Mahalanobis(m) => m.score(v),
            Detector::Irw(m) => m.score(v, 0),
            Detector::Cosine(m) => m.score(v, None),
        }
    }
}
