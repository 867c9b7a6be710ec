//! Per-layer anomaly scores and score-matrix construction.
//!
//! A fitted scorer covers a list of trace layers. For an input trace it
//! produces an `L_eff x C_eff` [`ScoreMatrix`]: one score per layer and per
//! class (Mahalanobis, IRW) or per layer only (cosine, `C_eff = 1`).

mod cosine;
mod irw;
mod mahalanobis;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cosine::CosineBank;
pub use irw::{sample_directions, IrwModel, DEFAULT_N_PROJ};
pub use mahalanobis::{
    mean_and_covariance, regularize, MahalanobisModel, DEFAULT_SHRINKAGE, MIN_SHRINKAGE,
    TRACE_FLOOR,
};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Rows;
use crate::trace::Embeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Mahalanobis,
    Irw,
    Cosine,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Mahalanobis => "mahalanobis",
            ScorerKind::Irw => "irw",
            ScorerKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(ScorerKind::Mahalanobis),
            "irw" => Ok(ScorerKind::Irw),
            "cosine" => Ok(ScorerKind::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown scorer '{other}'"))),
        }
    }
}

/// Everything needed to refit a scorer deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    #[serde(default = "default_n_proj")]
    pub n_proj: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub include_logits: bool,
}

fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}

fn default_n_proj() -> usize {
    DEFAULT_N_PROJ
}

fn default_true() -> bool {
    true
}

impl ScorerConfig {
    pub fn new(kind: ScorerKind) -> Self {
        Self {
            kind,
            shrinkage: DEFAULT_SHRINKAGE,
            n_proj: DEFAULT_N_PROJ,
            seed: 0,
            include_logits: true,
        }
    }

    pub fn fit<E: Embeddings + ?Sized>(&self, train: &E) -> Result<FittedScorer> {
        self.fit_layers(train, train.scored_layers(self.include_logits))
    }

    /// Fits on an explicit list of trace layers.
    pub fn fit_layers<E: Embeddings + ?Sized>(&self, train: &E, layers: Vec<usize>) -> Result<FittedScorer> {
        Ok(match self.kind {
            ScorerKind::Mahalanobis => {
                FittedScorer::Mahalanobis(fit_mahalanobis_layers(train, layers, self.shrinkage)?)
            }
            ScorerKind::Irw => {
                FittedScorer::Irw(fit_irw_layers(train, layers, self.n_proj, self.seed)?)
            }
            ScorerKind::Cosine => FittedScorer::Cosine(fit_cosine_layers(train, layers)?),
        })
    }
}

fn validate_layers<E: Embeddings + ?Sized>(train: &E, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers selected".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= train.n_layers()) {
        return Err(Error::InvalidArgument(format!(
            "layer {l} out of range for {} layers",
            train.n_layers()
        )));
    }
    Ok(())
}

fn stack<E: Embeddings + ?Sized>(train: &E, layer: usize, samples: impl Iterator<Item = usize>) -> Result<Rows> {
    let rows: Vec<Vec<f64>> = samples.map(|i| train.embedding(i, layer)).collect();
    Rows::from_rows(&rows)
}

/// Class-conditional means and precisions for every fitted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMahalanobis {
    pub layers: Vec<usize>,
    /// `[layer position][class]`.
    pub models: Vec<Vec<MahalanobisModel>>,
    pub shrinkage: f64,
}

pub fn fit_mahalanobis<E: Embeddings + ?Sized>(train: &E, shrinkage: f64) -> Result<FittedMahalanobis> {
    fit_mahalanobis_layers(train, train.scored_layers(true), shrinkage)
}

fn fit_mahalanobis_layers<E: Embeddings + ?Sized>(
    train: &E,
    layers: Vec<usize>,
    shrinkage: f64,
) -> Result<FittedMahalanobis> {
    train.require_labels()?;
    validate_layers(train, &layers)?;
    let classes: Vec<Vec<usize>> = (0..train.class_count())
        .map(|y| train.class_indices(y))
        .collect();
    let models = layers
        .par_iter()
        .map(|&layer| {
            classes
                .iter()
                .enumerate()
                .map(|(y, idx)| {
                    let pts = stack(train, layer, idx.iter().copied())?;
                    MahalanobisModel::fit(&pts, shrinkage).map_err(|reason| Error::Numerical {
                        layer,
                        class: y,
                        reason,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedMahalanobis {
        layers,
        models,
        shrinkage,
    })
}

/// `s_M` at layer position `layer` for class `class`.
pub fn score_mahalanobis(z: &[f64], fitted: &FittedMahalanobis, layer: usize, class: usize) -> Result<f64> {
    let model = fitted
        .models
        .get(layer)
        .and_then(|m| m.get(class))
        .ok_or_else(|| Error::InvalidArgument(format!("no Mahalanobis model for ({layer}, {class})")))?;
    model.score(z)
}

/// IRW directions (shared by all classes of a layer) and sorted projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedIrw {
    pub layers: Vec<usize>,
    /// One model per layer position; cloud index = class.
    pub per_layer: Vec<IrwModel>,
    pub n_proj: usize,
    pub seed: u64,
}

pub fn fit_irw<E: Embeddings + ?Sized>(train: &E, n_proj: usize, seed: u64) -> Result<FittedIrw> {
    fit_irw_layers(train, train.scored_layers(true), n_proj, seed)
}

fn fit_irw_layers<E: Embeddings + ?Sized>(
    train: &E,
    layers: Vec<usize>,
    n_proj: usize,
    seed: u64,
) -> Result<FittedIrw> {
    train.require_labels()?;
    validate_layers(train, &layers)?;
    if n_proj == 0 {
        return Err(Error::InvalidArgument("n_proj must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Rows> = layers
        .iter()
        .map(|&l| sample_directions(&mut rng, n_proj, train.layer_width(l)))
        .collect();
    let classes: Vec<Vec<usize>> = (0..train.class_count())
        .map(|y| train.class_indices(y))
        .collect();
    let per_layer = layers
        .par_iter()
        .zip(directions)
        .map(|(&layer, dirs)| {
            let clouds = classes
                .iter()
                .map(|idx| stack(train, layer, idx.iter().copied()))
                .collect::<Result<Vec<_>>>()?;
            IrwModel::with_directions(dirs, &clouds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedIrw {
        layers,
        per_layer,
        n_proj,
        seed,
    })
}

/// `-IRW depth` at layer position `layer` for class `class`.
pub fn score_irw(z: &[f64], fitted: &FittedIrw, layer: usize, class: usize) -> Result<f64> {
    fitted
        .per_layer
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no IRW layer {layer}")))?
        .score(z, class)
}

/// Normalised training bank per layer; no class dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCosine {
    pub layers: Vec<usize>,
    /// Bank row `i` is training sample `i`.
    pub banks: Vec<CosineBank>,
}

pub fn fit_cosine<E: Embeddings + ?Sized>(train: &E) -> Result<FittedCosine> {
    fit_cosine_layers(train, train.scored_layers(true))
}

fn fit_cosine_layers<E: Embeddings + ?Sized>(train: &E, layers: Vec<usize>) -> Result<FittedCosine> {
    validate_layers(train, &layers)?;
    let banks = layers
        .iter()
        .map(|&l| {
            let pts = stack(train, l, 0..train.n_samples())?;
            CosineBank::fit(&pts).map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("layer {l}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedCosine { layers, banks })
}

/// `s_C` at layer position `layer`, optionally excluding one training sample.
pub fn score_cosine(z: &[f64], fitted: &FittedCosine, layer: usize, exclude: Option<usize>) -> Result<f64> {
    fitted
        .banks
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no cosine layer {layer}")))?
        .score(z, exclude)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedScorer {
    Mahalanobis(FittedMahalanobis),
    Irw(FittedIrw),
    Cosine(FittedCosine),
}

impl FittedScorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            FittedScorer::Mahalanobis(_) => ScorerKind::Mahalanobis,
            FittedScorer::Irw(_) => ScorerKind::Irw,
            FittedScorer::Cosine(_) => ScorerKind::Cosine,
        }
    }

    /// Trace layers covered, in score-matrix row order.
    pub fn layers(&self) -> &[usize] {
        match self {
            FittedScorer::Mahalanobis(m) => &m.layers,
            FittedScorer::Irw(m) => &m.layers,
            FittedScorer::Cosine(m) => &m.layers,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers().len()
    }

    pub fn n_classes(&self) -> usize {
        match self {
            FittedScorer::Mahalanobis(m) => m.models[0].len(),
            FittedScorer::Irw(m) => m.per_layer[0].n_clouds(),
            FittedScorer::Cosine(_) => 1,
        }
    }

    /// Score of embedding `z` at layer position `layer`, class `class`.
    pub fn score(&self, z: &[f64], layer: usize, class: usize, exclude: Option<usize>) -> Result<f64> {
        match self {
            FittedScorer::Mahalanobis(m) => score_mahalanobis(z, m, layer, class),
            FittedScorer::Irw(m) => score_irw(z, m, layer, class),
            FittedScorer::Cosine(m) => score_cosine(z, m, layer, exclude),
        }
    }
}

/// Per-layer, per-class scores of one input, row-major `[L_eff, C_eff]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub scorer: ScorerKind,
    pub n_layers: usize,
    pub n_classes: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(scorer: ScorerKind, n_layers: usize, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        if n_layers == 0 || n_classes == 0 {
            return Err(Error::InvalidArgument("empty score matrix".into()));
        }
        check_dim(n_layers * n_classes, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("score matrix has non-finite entries".into()));
        }
        Ok(Self {
            scorer,
            n_layers,
            n_classes,
            values,
        })
    }

    pub fn get(&self, layer: usize, class: usize) -> f64 {
        self.values[layer * self.n_classes + class]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.n_classes..(layer + 1) * self.n_classes]
    }

    /// Scores of class `class` across layers: the vector `s_y`.
    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.n_layers).map(|l| self.get(l, class)).collect()
    }

    /// Row-major flattening (layers major).
    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.scorer,
            self.n_layers,
            self.n_classes,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }
}

fn score_matrix_impl(
    trace: &[Vec<f64>],
    scorer: &FittedScorer,
    exclude: Option<usize>,
) -> Result<ScoreMatrix> {
    let (l_eff, c_eff) = (scorer.n_layers(), scorer.n_classes());
    let mut values = Vec::with_capacity(l_eff * c_eff);
    for (pos, &layer) in scorer.layers().iter().enumerate() {
        let z = trace.get(layer).ok_or_else(|| Error::DimensionMismatch {
            expected: layer + 1,
            got: trace.len(),
        })?;
        for y in 0..c_eff {
            values.push(scorer.score(z, pos, y, exclude)?);
        }
    }
    ScoreMatrix::new(scorer.kind(), l_eff, c_eff, values)
}

/// Score matrix of one input trace (`trace[layer]` is that layer's
/// embedding, cut to layer width).
pub fn build_score_matrix(trace: &[Vec<f64>], scorer: &FittedScorer) -> Result<ScoreMatrix> {
    score_matrix_impl(trace, scorer, None)
}

/// Score matrices of every sample of `set`, in sample order.
pub fn score_set<E: Embeddings + ?Sized>(set: &E, scorer: &FittedScorer) -> Result<Vec<ScoreMatrix>> {
    (0..set.n_samples())
        .into_par_iter()
        .map(|i| build_score_matrix(&set.trace(i), scorer))
        .collect()
}

/// Score matrices of the training set, plus the labels that route them to
/// per-class detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScoreSet {
    pub matrices: Vec<ScoreMatrix>,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

impl ReferenceScoreSet {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn scorer(&self) -> ScorerKind {
        self.matrices[0].scorer
    }

    pub fn n_layers(&self) -> usize {
        self.matrices[0].n_layers
    }

    pub fn n_classes(&self) -> usize {
        self.matrices[0].n_classes
    }

    /// The stack `R_y`: layer-score vectors `s_y` of the training samples of
    /// class `y`. With a single score column every sample contributes.
    pub fn class_stack(&self, class: usize) -> Result<Rows> {
        let rows: Vec<Vec<f64>> = if self.n_classes() == 1 {
            self.matrices.iter().map(|m| m.column(0)).collect()
        } else {
            self.matrices
                .iter()
                .zip(&self.labels)
                .filter(|(_, &y)| y as usize == class)
                .map(|(m, _)| m.column(class))
                .collect()
        };
        if rows.is_empty() {
            return Err(Error::Data(format!("no reference rows for class {class}")));
        }
        Rows::from_rows(&rows)
    }

    /// All matrices flattened layers-major, one row per training sample.
    pub fn flattened(&self) -> Result<Rows> {
        let rows: Vec<&[f64]> = self.matrices.iter().map(|m| m.flatten()).collect();
        Rows::from_rows(&rows)
    }
}

/// Builds the reference set of `train` for a scorer fitted on it. Cosine
/// scores exclude each sample's own bank entry.
pub fn build_reference_set<E: Embeddings + ?Sized>(train: &E, scorer: &FittedScorer) -> Result<ReferenceScoreSet> {
    let labels = match train.labels() {
        Some(l) => l.to_vec(),
        None if scorer.n_classes() == 1 => vec![0; train.n_samples()],
        None => return Err(Error::Data("reference set needs training labels".into())),
    };
    let self_exclusion = scorer.kind() == ScorerKind::Cosine;
    let matrices = (0..train.n_samples())
        .into_par_iter()
        .map(|i| {
            let exclude = self_exclusion.then_some(i);
            score_matrix_impl(&train.trace(i), scorer, exclude)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceScoreSet {
        matrices,
        labels,
        class_count: train.class_count(),
    })
}
