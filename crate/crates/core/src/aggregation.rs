//! Reduction of score matrices to a single anomaly score.
//!
//! Three modes:
//! - no reference: a statistic down each class column, then the minimum over
//!   classes;
//! - data driven: one detector per class fitted on that class's reference
//!   stack, then the minimum over classes;
//! - global: one detector on the row-major flattened matrix.
//!
//! A pipeline is calibrated by taking a quantile of its scores on the training
//! reference set as threshold `gamma`; inputs scoring strictly above it are
//! flagged OUT.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, DetectorKind, DetectorParams};
use crate::error::{Error, Result};
use crate::scorers::{ReferenceScoreSet, ScoreMatrix, ScorerConfig};

pub const PIPELINE_VERSION: u32 = 1;
pub const DEFAULT_PROPORTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Statistic {
    Mean,
    /// Lower median, `v[(n - 1) / 2]` of the sorted column.
    Median,
    Min,
    Max,
    /// A single layer position.
    Coordinate(usize),
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Mean => f.write_str("mean"),
            Statistic::Median => f.write_str("median"),
            Statistic::Min => f.write_str("min"),
            Statistic::Max => f.write_str("max"),
            Statistic::Coordinate(l) => write!(f, "coordinate:{l}"),
        }
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => Statistic::Mean,
            "median" => Statistic::Median,
            "min" => Statistic::Min,
            "max" => Statistic::Max,
            _ => match s.strip_prefix("coordinate:") {
                Some(l) => Statistic::Coordinate(l.parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad coordinate layer in '{s}'"))
                })?),
                None => return Err(Error::InvalidArgument(format!("unknown statistic '{s}'"))),
            },
        })
    }
}

impl Statistic {
    fn apply(self, column: &[f64]) -> Result<f64> {
        if column.is_empty() {
            return Err(Error::InvalidArgument("empty score column".into()));
        }
        Ok(match self {
            Statistic::Mean => column.iter().sum::<f64>() / column.len() as f64,
            Statistic::Min => column.iter().copied().fold(f64::INFINITY, f64::min),
            Statistic::Max => column.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Statistic::Median => {
                let mut v = column.to_vec();
                v.sort_by(f64::total_cmp);
                v[(v.len() - 1) / 2]
            }
            Statistic::Coordinate(l) => *column.get(l).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "coordinate {l} out of range for {} layers",
                    column.len()
                ))
            })?,
        })
    }
}

/// How a pipeline reduces a score matrix. Parses from the textual aggregator
/// names (`mean`, `coordinate:3`, `if`, `agg_irw`, `global:lof`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AggregationMode {
    NoReference(Statistic),
    DataDriven(DetectorKind),
    Global(DetectorKind),
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationMode::NoReference(s) => write!(f, "{s}"),
            AggregationMode::DataDriven(k) => write!(f, "{k}"),
            AggregationMode::Global(k) => write!(f, "global:{k}"),
        }
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(kind) = s.strip_prefix("global:") {
            return Ok(AggregationMode::Global(kind.parse()?));
        }
        if let Ok(kind) = s.parse::<DetectorKind>() {
            return Ok(AggregationMode::DataDriven(kind));
        }
        s.parse::<Statistic>()
            .map(AggregationMode::NoReference)
            .map_err(|_| Error::InvalidArgument(format!("unknown aggregator '{s}'")))
    }
}

impl Serialize for AggregationMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AggregationMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// No-reference aggregation: `stat` down each class column, then the minimum
/// over classes.
pub fn agg_noref(scores: &ScoreMatrix, stat: Statistic) -> Result<f64> {
    if scores.values.is_empty() {
        return Err(Error::InvalidArgument("empty score matrix".into()));
    }
    let mut best = f64::INFINITY;
    for y in 0..scores.n_classes {
        best = best.min(stat.apply(&scores.column(y))?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    In,
    Out,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::In => "IN",
            Decision::Out => "OUT",
        })
    }
}

/// OUT iff `score > gamma`.
pub fn decide(score: f64, gamma: f64) -> Result<Decision> {
    if score.is_nan() || gamma.is_nan() {
        return Err(Error::Data("cannot decide on a NaN score or threshold".into()));
    }
    Ok(if score > gamma {
        Decision::Out
    } else {
        Decision::In
    })
}

/// Empirical `proportion`-quantile with linear interpolation between order
/// statistics (`h = (n - 1) p`, zero based).
pub fn select_threshold(scores: &[f64], proportion: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to calibrate on".into()));
    }
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidArgument(format!(
            "proportion {proportion} not in [0, 1]"
        )));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN among calibration scores".into()));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * proportion;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A fitted (and optionally calibrated) aggregation pipeline.
///
/// The scorer is stored by configuration plus the training manifest it was
/// fitted on; refitting is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationPipeline {
    pub version: u32,
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub train_manifest: Option<String>,
    pub mode: AggregationMode,
    pub params: DetectorParams,
    pub seed: u64,
    pub n_layers: usize,
    pub n_classes: usize,
    /// One per class (data driven), one (global) or none (no reference).
    pub models: Vec<Detector>,
    pub threshold: Option<f64>,
}

impl AggregationPipeline {
    /// Fits the aggregation on a reference set. No threshold is set.
    pub fn fit(
        scorer: ScorerConfig,
        reference: &ReferenceScoreSet,
        mode: AggregationMode,
        params: &DetectorParams,
        seed: u64,
    ) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Data("empty reference set".into()));
        }
        if reference.scorer() != scorer.kind {
            return Err(Error::InvalidArgument(format!(
                "reference set built with {}, pipeline scorer is {}",
                reference.scorer(),
                scorer.kind
            )));
        }
        let (n_layers, n_classes) = (reference.n_layers(), reference.n_classes());
        let models = match mode {
            AggregationMode::NoReference(Statistic::Coordinate(l)) if l >= n_layers => {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {l} out of range for {n_layers} layers"
                )))
            }
            AggregationMode::NoReference(_) => Vec::new(),
            AggregationMode::DataDriven(kind) => (0..n_classes)
                .into_par_iter()
                .map(|y| {
                    let stack = reference.class_stack(y)?;
                    Detector::fit(kind, &stack, params, class_seed(seed, y)).map_err(|e| match e {
                        Error::Data(m) => Error::Data(format!("class {y}: {m}")),
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            AggregationMode::Global(kind) => {
                vec![Detector::fit(kind, &reference.flattened()?, params, seed)?]
            }
        };
        Ok(Self {
            version: PIPELINE_VERSION,
            scorer,
            train_manifest: None,
            mode,
            params: params.clone(),
            seed,
            n_layers,
            n_classes,
            models,
            threshold: None,
        })
    }

    /// Aggregated anomaly score of one score matrix.
    pub fn score(&self, scores: &ScoreMatrix) -> Result<f64> {
        if scores.scorer != self.scorer.kind {
            return Err(Error::InvalidArgument(format!(
                "score matrix from {}, pipeline expects {}",
                scores.scorer, self.scorer.kind
            )));
        }
        if (scores.n_layers, scores.n_classes) != (self.n_layers, self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "score matrix is {}x{}, pipeline expects {}x{}",
                scores.n_layers, scores.n_classes, self.n_layers, self.n_classes
            )));
        }
        match self.mode {
            AggregationMode::NoReference(stat) => agg_noref(scores, stat),
            AggregationMode::DataDriven(_) => {
                let mut best = f64::INFINITY;
                for (y, model) in self.models.iter().enumerate() {
                    best = best.min(model.score(&scores.column(y))?);
                }
                Ok(best)
            }
            AggregationMode::Global(_) => self.models[0].score(scores.flatten()),
        }
    }

    /// Scores a batch; output order matches input order.
    pub fn score_batch(&self, matrices: &[ScoreMatrix]) -> Result<Vec<f64>> {
        matrices.par_iter().map(|m| self.score(m)).collect()
    }

    /// Sets `gamma` to the `proportion` quantile of the pipeline's scores on
    /// the reference set; returns those training scores.
    pub fn calibrate(&mut self, reference: &ReferenceScoreSet, proportion: f64) -> Result<Vec<f64>> {
        let scores = self.score_batch(&reference.matrices)?;
        self.threshold = Some(select_threshold(&scores, proportion)?);
        Ok(scores)
    }

    pub fn decide(&self, score: f64) -> Result<Decision> {
        let gamma = self.threshold.ok_or_else(|| {
            Error::InvalidArgument("pipeline has no threshold; run calibrate first".into())
        })?;
        decide(score, gamma)
    }

    pub fn descriptor(&self) -> String {
        format!("{}+{}", self.scorer.kind, self.mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text)?;
        if p.version != PIPELINE_VERSION {
            return Err(Error::Format(format!(
                "pipeline version {} unsupported (expected {PIPELINE_VERSION})",
                p.version
            )));
        }
        Ok(p)
    }
}
