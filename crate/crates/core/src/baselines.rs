//! Comparison detectors: softmax confidence, energy, single-layer scorers and
//! power-mean pre-aggregation of the hidden layers.

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationMode, AggregationPipeline, Statistic};
use crate::detectors::DetectorParams;
use crate::error::{Error, Result};
use crate::scorers::{build_reference_set, FittedScorer, ReferenceScoreSet, ScorerConfig};
use crate::trace::{DenseEmbeddings, EmbeddingTraceSet};

const SIMPLEX_TOL: f64 = 1e-6;

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("softmax needs finite, non-empty logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `-max_i p_i` for a probability vector.
pub fn msp_score(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Data("empty probability vector".into()));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Data(format!(
            "probabilities not on the simplex (sum {sum})"
        )));
    }
    Ok(-probs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn msp_from_logits(logits: &[f64]) -> Result<f64> {
    msp_score(&softmax(logits)?)
}

/// Energy score `-T log sum_i exp(l_i / T)`, via a max-shifted log-sum-exp.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("energy needs finite, non-empty logits".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(-temperature * lse)
}

/// Which single layer a baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    LastEncoder,
    Logits,
}

/// A scorer plus a coordinate pipeline on one of its layers.
#[derive(Debug, Clone)]
pub struct SingleLayerDetector {
    pub scorer: FittedScorer,
    pub reference: ReferenceScoreSet,
    pub pipeline: AggregationPipeline,
}

/// Fits `scorer` on all layers of `train` (logits included when selected)
/// and reduces with the coordinate statistic at the selected layer.
pub fn single_layer_detector(
    train: &EmbeddingTraceSet,
    scorer: &ScorerConfig,
    selector: LayerSelector,
) -> Result<SingleLayerDetector> {
    let mut cfg = scorer.clone();
    let layer = match selector {
        LayerSelector::LastEncoder => train.last_encoder_layer()?,
        LayerSelector::Logits => {
            if !train.has_logits() {
                return Err(Error::Data("logits requested but the trace set has none".into()));
            }
            cfg.include_logits = true;
            train.n_layers() - 1
        }
    };
    let fitted = cfg.fit(train)?;
    let position = fitted
        .layers()
        .iter()
        .position(|&l| l == layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} not covered by scorer")))?;
    let reference = build_reference_set(train, &fitted)?;
    let pipeline = AggregationPipeline::fit(
        cfg,
        &reference,
        AggregationMode::NoReference(Statistic::Coordinate(position)),
        &DetectorParams::default(),
        0,
    )?;
    Ok(SingleLayerDetector {
        scorer: fitted,
        reference,
        pipeline,
    })
}

/// Exponents of the power means; `+inf`/`-inf` give max / min.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMeanConfig {
    pub exponents: Vec<f64>,
    /// Concatenate one aggregated embedding per exponent. Without it exactly
    /// one exponent is allowed.
    pub concat: bool,
}

impl Default for PowerMeanConfig {
    fn default() -> Self {
        Self {
            exponents: vec![-1.0, 1.0],
            concat: true,
        }
    }
}

impl PowerMeanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exponents.is_empty() {
            return Err(Error::InvalidArgument("power-mean exponent list is empty".into()));
        }
        if !self.concat && self.exponents.len() > 1 {
            return Err(Error::InvalidArgument(
                "several power-mean exponents require concat".into(),
            ));
        }
        if self.exponents.iter().any(|p| p.is_nan()) {
            return Err(Error::InvalidArgument("NaN power-mean exponent".into()));
        }
        Ok(())
    }
}

fn power_mean(values: &[f64], p: f64) -> Result<f64> {
    let n = values.len() as f64;
    let out = if p == f64::INFINITY {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else if p == f64::NEG_INFINITY {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    } else if p == 0.0 {
        if values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data("geometric mean of non-positive values".into()));
        }
        (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
    } else if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        let k = p as i32;
        let m = values.iter().map(|v| v.powi(k)).sum::<f64>() / n;
        if k == 1 {
            m
        } else if k % 2 == 0 {
            m.powf(1.0 / p)
        } else {
            m.signum() * m.abs().powf(1.0 / p)
        }
    } else {
        if values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data(format!(
                "power mean with fractional exponent {p} needs positive values"
            )));
        }
        (values.iter().map(|v| v.powf(p)).sum::<f64>() / n).powf(1.0 / p)
    };
    if !out.is_finite() {
        return Err(Error::Data(format!("power mean with exponent {p} is not finite")));
    }
    Ok(out)
}

/// Coordinate-wise power means over the layers of one trace, concatenated
/// across exponents in list order.
pub fn power_mean_aggregate(trace: &[Vec<f64>], cfg: &PowerMeanConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = trace
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?
        .len();
    if let Some(row) = trace.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    let mut out = Vec::with_capacity(d * cfg.exponents.len());
    let mut column = vec![0.0; trace.len()];
    for &p in &cfg.exponents {
        for j in 0..d {
            for (c, row) in column.iter_mut().zip(trace) {
                *c = row[j];
            }
            out.push(power_mean(&column, p)?);
        }
    }
    Ok(out)
}

/// Single-layer embeddings built from the power means of the encoder layers
/// (the logits row is never included).
pub fn power_mean_embeddings(set: &EmbeddingTraceSet, cfg: &PowerMeanConfig) -> Result<DenseEmbeddings> {
    let encoder = set.encoder_layer_count();
    if encoder == 0 {
        return Err(Error::Data("no encoder layers to aggregate".into()));
    }
    let mut values = Vec::new();
    let mut width = 0;
    for i in 0..set.n_samples() {
        let trace: Vec<Vec<f64>> = (0..encoder).map(|l| set.embedding(i, l)).collect();
        let agg = power_mean_aggregate(&trace, cfg)?;
        width = agg.len();
        values.extend(agg);
    }
    DenseEmbeddings::new(
        set.n_samples(),
        1,
        width,
        values,
        set.labels().map(<[u32]>::to_vec),
        set.class_count(),
    )
}
