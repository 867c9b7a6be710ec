//! Detection metrics. OUT is the positive class and higher scores mean more
//! anomalous; thresholds flag a score as OUT when it is strictly above.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Rows;

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Positive {
    In,
    Out,
}

fn check(in_scores: &[f64], out_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::InvalidArgument("metrics need IN and OUT scores".into()));
    }
    if in_scores.iter().chain(out_scores).any(|v| v.is_nan()) {
        return Err(Error::Data("NaN score passed to a metric".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Count of entries of sorted `v` strictly greater than `t`.
fn count_above(v: &[f64], t: f64) -> usize {
    v.len() - v.partition_point(|&x| x <= t)
}

/// `P(s_out > s_in) + P(s_out = s_in) / 2`.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check(in_scores, out_scores)?;
    let ins = sorted(in_scores);
    let (mut wins, mut ties) = (0usize, 0usize);
    for &s in out_scores {
        let lt = ins.partition_point(|&x| x < s);
        let le = ins.partition_point(|&x| x <= s);
        wins += lt;
        ties += le - lt;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (in_scores.len() * out_scores.len()) as f64)
}

/// Thresholds that realise every distinct (TPR, FPR) pair: each observed
/// score, plus one below all of them.
fn candidate_thresholds(in_scores: &[f64], out_scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = in_scores.iter().chain(out_scores).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.insert(0, f64::NEG_INFINITY);
    t
}

/// Smallest FPR over thresholds whose TPR is at least `tpr`.
pub fn fpr_at_tpr(in_scores: &[f64], out_scores: &[f64], tpr: f64) -> Result<f64> {
    check(in_scores, out_scores)?;
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::InvalidArgument(format!("TPR level {tpr} not in [0, 1]")));
    }
    let (ins, outs) = (sorted(in_scores), sorted(out_scores));
    let (n_in, n_out) = (ins.len() as f64, outs.len() as f64);
    let best = candidate_thresholds(&ins, &outs)
        .into_iter()
        .filter(|&t| count_above(&outs, t) as f64 / n_out >= tpr)
        .map(|t| count_above(&ins, t) as f64 / n_in)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Minimum over thresholds of `FPR / 2 + FNR / 2`.
pub fn detection_error(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check(in_scores, out_scores)?;
    let (ins, outs) = (sorted(in_scores), sorted(out_scores));
    let (n_in, n_out) = (ins.len() as f64, outs.len() as f64);
    let best = candidate_thresholds(&ins, &outs)
        .into_iter()
        .map(|t| {
            let fp = count_above(&ins, t) as f64;
            let missed = (outs.len() - count_above(&outs, t)) as f64;
            0.5 * (fp / n_in) + 0.5 * (missed / n_out)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Step-wise average precision, `sum_k (R_k - R_{k-1}) P_k` over thresholds
/// in decreasing order. With `Positive::In` the scores are negated.
pub fn aupr(in_scores: &[f64], out_scores: &[f64], positive: Positive) -> Result<f64> {
    check(in_scores, out_scores)?;
    let mut labelled: Vec<(f64, bool)> = match positive {
        Positive::Out => in_scores
            .iter()
            .map(|&s| (s, false))
            .chain(out_scores.iter().map(|&s| (s, true)))
            .collect(),
        Positive::In => in_scores
            .iter()
            .map(|&s| (-s, true))
            .chain(out_scores.iter().map(|&s| (-s, false)))
            .collect(),
    };
    labelled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = labelled.iter().filter(|(_, p)| *p).count() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < labelled.len() {
        let t = labelled[i].0;
        while i < labelled.len() && labelled[i].0 == t {
            if labelled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub detector: String,
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub detection_error: f64,
    pub n_in: usize,
    pub n_out: usize,
}

impl EvaluationReport {
    pub fn evaluate(detector: impl Into<String>, in_scores: &[f64], out_scores: &[f64]) -> Result<Self> {
        Ok(Self {
            detector: detector.into(),
            auroc: auroc(in_scores, out_scores)?,
            fpr_at_95_tpr: fpr_at_tpr(in_scores, out_scores, DEFAULT_TPR)?,
            aupr_in: aupr(in_scores, out_scores, Positive::In)?,
            aupr_out: aupr(in_scores, out_scores, Positive::Out)?,
            detection_error: detection_error(in_scores, out_scores)?,
            n_in: in_scores.len(),
            n_out: out_scores.len(),
        })
    }

    pub const CSV_HEADER: [&'static str; 8] =
        ["detector", "auroc", "fpr95", "aupr_in", "aupr_out", "err", "n_in", "n_out"];

    /// CSV fields in header order; floats use shortest round-trip form.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.detector.clone(),
            self.auroc.to_string(),
            self.fpr_at_95_tpr.to_string(),
            self.aupr_in.to_string(),
            self.aupr_out.to_string(),
            self.detection_error.to_string(),
            self.n_in.to_string(),
            self.n_out.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Fpr95,
    AuprIn,
    AuprOut,
    DetectionError,
}

impl Metric {
    pub fn compute(self, in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(in_scores, out_scores),
            Metric::Fpr95 => fpr_at_tpr(in_scores, out_scores, DEFAULT_TPR),
            Metric::AuprIn => aupr(in_scores, out_scores, Positive::In),
            Metric::AuprOut => aupr(in_scores, out_scores, Positive::Out),
            Metric::DetectionError => detection_error(in_scores, out_scores),
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Fpr95 | Metric::DetectionError)
    }
}

/// Best single layer for `metric`, given per-layer scores `[n, L]` of the IN
/// and OUT samples. Ties go to the smallest layer index.
pub fn oracle_best_layer(per_layer_in: &Rows, per_layer_out: &Rows, metric: Metric) -> Result<(usize, f64)> {
    let l = per_layer_in.n_cols();
    if l == 0 || per_layer_out.n_cols() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: per_layer_out.n_cols(),
        });
    }
    let column = |m: &Rows, j: usize| -> Vec<f64> { m.iter_rows().map(|r| r[j]).collect() };
    let mut best: Option<(usize, f64)> = None;
    for j in 0..l {
        let v = metric.compute(&column(per_layer_in, j), &column(per_layer_out, j))?;
        let better = match best {
            None => true,
            Some((_, b)) if metric.higher_is_better() => v > b,
            Some((_, b)) => v < b,
        };
        if better {
            best = Some((j, v));
        }
    }
    Ok(best.expect("at least one layer"))
}
