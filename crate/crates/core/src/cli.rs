//! Command implementations behind the `layertrace` binary: benchmark
//! generation, pipeline fit / calibrate / score, and the evaluation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationMode, AggregationPipeline, Decision, Statistic, DEFAULT_PROPORTION};
use crate::baselines::{
    energy_score, msp_from_logits, power_mean_embeddings, single_layer_detector, LayerSelector,
    PowerMeanConfig,
};
use crate::detectors::DetectorParams;
use crate::error::{Error, Result};
use crate::matrix::Rows;
use crate::metrics::{oracle_best_layer, EvaluationReport, Metric};
use crate::scorers::{
    build_reference_set, score_set, ScoreMatrix, ScorerConfig, ScorerKind, DEFAULT_N_PROJ,
    DEFAULT_SHRINKAGE,
};
use crate::trace::{load_trace_set, save_trace_set, synth_generate, EmbeddingTraceSet, SynthConfig};

/// Environment variable capping the worker pool (`0` = automatic).
pub const THREADS_ENV: &str = "LAYERTRACE_THREADS";

/// Writes `train/`, `in_test/` and `out_test/` trace sets under `out`.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<[PathBuf; 3]> {
    let bench = synth_generate(cfg)?;
    Ok([
        save_trace_set(&bench.train, out.join("train"))?,
        save_trace_set(&bench.in_test, out.join("in_test"))?,
        save_trace_set(&bench.out_test, out.join("out_test"))?,
    ])
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

/// Fits scorer + aggregation on a training manifest. The result carries no
/// threshold until [`cmd_calibrate`] runs.
pub fn cmd_fit(
    train_manifest: &Path,
    scorer: ScorerConfig,
    mode: AggregationMode,
    params: &DetectorParams,
    seed: u64,
) -> Result<AggregationPipeline> {
    let train = load_trace_set(train_manifest)?;
    let fitted = scorer.fit(&train)?;
    let reference = build_reference_set(&train, &fitted)?;
    let mut pipeline = AggregationPipeline::fit(scorer, &reference, mode, params, seed)?;
    pipeline.train_manifest = Some(absolute(train_manifest)?.to_string_lossy().into_owned());
    Ok(pipeline)
}

fn refit_reference(pipeline: &AggregationPipeline) -> Result<(EmbeddingTraceSet, crate::scorers::FittedScorer)> {
    let manifest = pipeline
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pipeline does not reference a training manifest".into()))?;
    let train = load_trace_set(manifest)?;
    let fitted = pipeline.scorer.fit(&train)?;
    Ok((train, fitted))
}

/// Sets the threshold from the pipeline's own training reference scores.
pub fn cmd_calibrate(pipeline: &mut AggregationPipeline, proportion: f64) -> Result<f64> {
    let (train, fitted) = refit_reference(pipeline)?;
    let reference = build_reference_set(&train, &fitted)?;
    pipeline.calibrate(&reference, proportion)?;
    Ok(pipeline.threshold.expect("set by calibrate"))
}

/// Per-sample score and decision for every sample of a manifest.
pub fn cmd_score(pipeline: &AggregationPipeline, manifest: &Path) -> Result<Vec<(usize, f64, Decision)>> {
    if pipeline.threshold.is_none() {
        return Err(Error::InvalidArgument(
            "pipeline has no threshold; run `layertrace calibrate` first".into(),
        ));
    }
    let (_, fitted) = refit_reference(pipeline)?;
    let set = load_trace_set(manifest)?;
    let scores = pipeline.score_batch(&score_set(&set, &fitted)?)?;
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| Ok((i, s, pipeline.decide(s)?)))
        .collect()
}

pub fn write_scores_csv(rows: &[(usize, f64, Decision)], out: &Path) -> Result<()> {
    let mut text = String::from("sample_index,score,decision\n");
    for (i, s, d) in rows {
        let _ = writeln!(text, "{i},{s},{d}");
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Msp,
    Energy,
    LastLayer,
    Logits,
    Pw,
}

impl Baseline {
    fn as_str(self) -> &'static str {
        match self {
            Baseline::Msp => "msp",
            Baseline::Energy => "energy",
            Baseline::LastLayer => "last_layer",
            Baseline::Logits => "logits",
            Baseline::Pw => "pw",
        }
    }

    fn per_scorer(self) -> bool {
        !matches!(self, Baseline::Msp | Baseline::Energy)
    }
}

/// Power-mean exponent as written in a config: a number, or one of
/// `"inf"`, `"-inf"`, `"max"`, `"min"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent(pub f64);

impl FromStr for Exponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Exponent(match s {
            "inf" | "+inf" | "max" => f64::INFINITY,
            "-inf" | "min" => f64::NEG_INFINITY,
            other => other
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad power-mean exponent '{other}'")))?,
        }))
    }
}

impl Serialize for Exponent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_proportion() -> f64 {
    DEFAULT_PROPORTION
}
fn default_seeds() -> Vec<u64> {
    vec![0]
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
fn default_exponents() -> Vec<Exponent> {
    PowerMeanConfig::default()
        .exponents
        .into_iter()
        .map(Exponent)
        .collect()
}
fn default_temperature() -> f64 {
    1.0
}

/// The evaluation matrix. Relative paths are resolved against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: PathBuf,
    pub in_test: PathBuf,
    pub out_test: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scorers: Vec<ScorerKind>,
    #[serde(default)]
    pub aggregators: Vec<AggregationMode>,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default = "default_proportion")]
    pub threshold_proportion: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    #[serde(default = "default_n_proj")]
    pub n_proj: usize,
    #[serde(default = "default_true")]
    pub include_logits: bool,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default = "default_exponents")]
    pub pw_exponents: Vec<Exponent>,
    #[serde(default = "default_temperature")]
    pub energy_temperature: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.train, &mut cfg.in_test, &mut cfg.out_test, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let has_matrix = !self.scorers.is_empty() && !self.aggregators.is_empty();
        if !has_matrix && self.baselines.is_empty() {
            return Err(Error::InvalidArgument(
                "config needs at least one scorer + aggregator, or a baseline".into(),
            ));
        }
        if self.baselines.iter().any(|b| b.per_scorer()) && self.scorers.is_empty() {
            return Err(Error::InvalidArgument(
                "last_layer / logits / pw baselines need at least one scorer".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold_proportion) {
            return Err(Error::InvalidArgument("threshold_proportion not in [0, 1]".into()));
        }
        for p in [&self.train, &self.in_test, &self.out_test] {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn scorer_config(&self, kind: ScorerKind, seed: u64) -> ScorerConfig {
        ScorerConfig {
            kind,
            shrinkage: self.shrinkage,
            n_proj: self.n_proj,
            seed,
            include_logits: self.include_logits,
        }
    }
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    /// Empty for scorer-free baselines.
    pub scorer: String,
    pub aggregator: String,
    pub detector: String,
    pub report: Option<EvaluationReport>,
    pub threshold: Option<f64>,
    /// Fraction of IN-test / OUT-test samples above the threshold.
    pub in_flag_rate: Option<f64>,
    pub out_flag_rate: Option<f64>,
    /// Selected layer position, for oracle rows.
    pub layer: Option<usize>,
    pub error: Option<String>,
}

impl ReportRow {
    fn new(seed: u64, scorer: &str, aggregator: &str) -> Self {
        let detector = if scorer.is_empty() {
            aggregator.to_string()
        } else {
            format!("{scorer}+{aggregator}")
        };
        Self {
            seed,
            scorer: scorer.to_string(),
            aggregator: aggregator.to_string(),
            detector,
            report: None,
            threshold: None,
            in_flag_rate: None,
            out_flag_rate: None,
            layer: None,
            error: None,
        }
    }

    fn failed(mut self, e: &Error) -> Self {
        self.error = Some(e.to_string());
        self
    }

    fn key(&self) -> (String, String, u64) {
        (self.scorer.clone(), self.aggregator.clone(), self.seed)
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "detector", "auroc", "fpr95", "aupr_in", "aupr_out", "err", "n_in", "n_out", "seed",
        "scorer", "aggregator", "threshold", "in_flag_rate", "out_flag_rate", "error",
    ];

    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut fields = match &self.report {
            Some(r) => r.csv_fields(),
            None => {
                let mut f = vec![self.detector.clone()];
                f.extend(std::iter::repeat_n(String::new(), 7));
                f
            }
        };
        let layer_note = self.layer.map(|l| format!("layer={l}"));
        fields.extend([
            self.seed.to_string(),
            self.scorer.clone(),
            self.aggregator.clone(),
            opt(self.threshold),
            opt(self.in_flag_rate),
            opt(self.out_flag_rate),
            self.error.clone().or(layer_note).unwrap_or_default(),
        ]);
        fields.into_iter().map(|f| csv_escape(&f)).collect::<Vec<_>>().join(",")
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Per-layer metrics of the single-layer (coordinate) detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub seed: u64,
    pub scorer: String,
    pub layer: usize,
    pub trace_layer: usize,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rows: Vec<ReportRow>,
    pub per_layer: Vec<LayerRow>,
}

impl EvalOutcome {
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_some())
    }

    pub fn report_csv(&self) -> String {
        let mut out = ReportRow::CSV_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn per_layer_csv(&self) -> String {
        let mut out =
            String::from("seed,scorer,layer,trace_layer,auroc,fpr95,aupr_in,aupr_out,err\n");
        for r in &self.per_layer {
            let m = &r.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.scorer,
                r.layer,
                r.trace_layer,
                m.auroc,
                m.fpr_at_95_tpr,
                m.aupr_in,
                m.aupr_out,
                m.detection_error
            );
        }
        out
    }

    /// Writes `report.json`, `report.csv` and `per_layer.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        for (name, body) in [
            ("report.json", json),
            ("report.csv", self.report_csv()),
            ("per_layer.csv", self.per_layer_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

struct Benchmark {
    train: EmbeddingTraceSet,
    in_test: EmbeddingTraceSet,
    out_test: EmbeddingTraceSet,
}

fn flag_rate(scores: &[f64], gamma: f64) -> f64 {
    scores.iter().filter(|&&s| s > gamma).count() as f64 / scores.len() as f64
}

/// Calibrates on `train_scores`, evaluates IN vs OUT, and fills `row`.
fn fill_row(
    mut row: ReportRow,
    train_scores: &[f64],
    in_scores: &[f64],
    out_scores: &[f64],
    proportion: f64,
) -> ReportRow {
    let result = (|| -> Result<()> {
        let gamma = crate::aggregation::select_threshold(train_scores, proportion)?;
        row.report = Some(EvaluationReport::evaluate(row.detector.clone(), in_scores, out_scores)?);
        row.threshold = Some(gamma);
        row.in_flag_rate = Some(flag_rate(in_scores, gamma));
        row.out_flag_rate = Some(flag_rate(out_scores, gamma));
        Ok(())
    })();
    match result {
        Ok(()) => row,
        Err(e) => row.failed(&e),
    }
}

fn pipeline_row(
    cfg: &RunConfig,
    seed: u64,
    scorer: ScorerKind,
    mode: AggregationMode,
    reference: &crate::scorers::ReferenceScoreSet,
    in_mats: &[ScoreMatrix],
    out_mats: &[ScoreMatrix],
) -> ReportRow {
    let row = ReportRow::new(seed, scorer.as_str(), &mode.to_string());
    let scored = (|| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut p = AggregationPipeline::fit(cfg.scorer_config(scorer, seed), reference, mode, &cfg.detector, seed)?;
        let train = p.calibrate(reference, cfg.threshold_proportion)?;
        Ok((train, p.score_batch(in_mats)?, p.score_batch(out_mats)?))
    })();
    match scored {
        Ok((train, ins, outs)) => fill_row(row, &train, &ins, &outs, cfg.threshold_proportion),
        Err(e) => row.failed(&e),
    }
}

/// Oracle row, per-layer rows, aggregator rows and per-scorer baseline rows
/// for one (seed, scorer) unit.
fn run_scorer(cfg: &RunConfig, bench: &Benchmark, seed: u64, kind: ScorerKind) -> (Vec<ReportRow>, Vec<LayerRow>) {
    let mut rows = Vec::new();
    let mut layers = Vec::new();
    let scorer_cfg = cfg.scorer_config(kind, seed);

    let fitted = (|| -> Result<_> {
        let fitted = scorer_cfg.fit(&bench.train)?;
        let reference = build_reference_set(&bench.train, &fitted)?;
        let in_mats = score_set(&bench.in_test, &fitted)?;
        let out_mats = score_set(&bench.out_test, &fitted)?;
        Ok((fitted, reference, in_mats, out_mats))
    })();

    match fitted {
        Ok((fitted, reference, in_mats, out_mats)) => {
            let oracle = ReportRow::new(seed, kind.as_str(), "oracle");
            match per_layer_reports(seed, kind, fitted.layers(), &reference, &in_mats, &out_mats) {
                Ok((layer_rows, per_in, per_out)) => {
                    let r = (|| -> Result<ReportRow> {
                        let (best, _) = oracle_best_layer(&per_in, &per_out, Metric::Auroc)?;
                        let column = |m: &Rows| m.iter_rows().map(|r| r[best]).collect::<Vec<_>>();
                        let train: Vec<f64> = reference
                            .matrices
                            .iter()
                            .map(|m| crate::aggregation::agg_noref(m, Statistic::Coordinate(best)))
                            .collect::<Result<_>>()?;
                        let mut row = fill_row(
                            oracle.clone(),
                            &train,
                            &column(&per_in),
                            &column(&per_out),
                            cfg.threshold_proportion,
                        );
                        row.layer = Some(best);
                        Ok(row)
                    })();
                    rows.push(r.unwrap_or_else(|e| oracle.failed(&e)));
                    layers = layer_rows;
                }
                Err(e) => rows.push(oracle.failed(&e)),
            }
            for &mode in &cfg.aggregators {
                rows.push(pipeline_row(cfg, seed, kind, mode, &reference, &in_mats, &out_mats));
            }
        }
        Err(e) => {
            rows.push(ReportRow::new(seed, kind.as_str(), "oracle").failed(&e));
            for mode in &cfg.aggregators {
                rows.push(ReportRow::new(seed, kind.as_str(), &mode.to_string()).failed(&e));
            }
        }
    }

    for &b in cfg.baselines.iter().filter(|b| b.per_scorer()) {
        let row = ReportRow::new(seed, kind.as_str(), b.as_str());
        let scored = match b {
            Baseline::LastLayer => single_layer_scores(bench, &scorer_cfg, LayerSelector::LastEncoder),
            Baseline::Logits => single_layer_scores(bench, &scorer_cfg, LayerSelector::Logits),
            Baseline::Pw => power_mean_scores(cfg, bench, &scorer_cfg),
            Baseline::Msp | Baseline::Energy => unreachable!("scorer-free baselines handled per seed"),
        };
        rows.push(match scored {
            Ok((train, ins, outs)) => fill_row(row, &train, &ins, &outs, cfg.threshold_proportion),
            Err(e) => row.failed(&e),
        });
    }
    (rows, layers)
}

type ScoreTriple = (Vec<f64>, Vec<f64>, Vec<f64>);

fn per_layer_reports(
    seed: u64,
    kind: ScorerKind,
    trace_layers: &[usize],
    _reference: &crate::scorers::ReferenceScoreSet,
    in_mats: &[ScoreMatrix],
    out_mats: &[ScoreMatrix],
) -> Result<(Vec<LayerRow>, Rows, Rows)> {
    let per_sample = |mats: &[ScoreMatrix]| -> Result<Rows> {
        let rows: Vec<Vec<f64>> = mats
            .iter()
            .map(|m| {
                (0..m.n_layers)
                    .map(|l| crate::aggregation::agg_noref(m, Statistic::Coordinate(l)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Rows::from_rows(&rows)
    };
    let (per_in, per_out) = (per_sample(in_mats)?, per_sample(out_mats)?);
    let mut rows = Vec::new();
    for (pos, &trace_layer) in trace_layers.iter().enumerate() {
        let ins: Vec<f64> = per_in.iter_rows().map(|r| r[pos]).collect();
        let outs: Vec<f64> = per_out.iter_rows().map(|r| r[pos]).collect();
        rows.push(LayerRow {
            seed,
            scorer: kind.as_str().to_string(),
            layer: pos,
            trace_layer,
            report: EvaluationReport::evaluate(format!("{kind}+coordinate:{pos}"), &ins, &outs)?,
        });
    }
    Ok((rows, per_in, per_out))
}

fn single_layer_scores(bench: &Benchmark, scorer: &ScorerConfig, selector: LayerSelector) -> Result<ScoreTriple> {
    let det = single_layer_detector(&bench.train, scorer, selector)?;
    let train = det.pipeline.score_batch(&det.reference.matrices)?;
    let ins = det.pipeline.score_batch(&score_set(&bench.in_test, &det.scorer)?)?;
    let outs = det.pipeline.score_batch(&score_set(&bench.out_test, &det.scorer)?)?;
    Ok((train, ins, outs))
}

fn power_mean_scores(cfg: &RunConfig, bench: &Benchmark, scorer: &ScorerConfig) -> Result<ScoreTriple> {
    let pm = PowerMeanConfig {
        exponents: cfg.pw_exponents.iter().map(|e| e.0).collect(),
        concat: true,
    };
    let train = power_mean_embeddings(&bench.train, &pm)?;
    let fitted = scorer.fit(&train)?;
    let reference = build_reference_set(&train, &fitted)?;
    let reduce = |mats: &[ScoreMatrix]| -> Result<Vec<f64>> {
        mats.iter()
            .map(|m| crate::aggregation::agg_noref(m, Statistic::Coordinate(0)))
            .collect()
    };
    let ins = score_set(&power_mean_embeddings(&bench.in_test, &pm)?, &fitted)?;
    let outs = score_set(&power_mean_embeddings(&bench.out_test, &pm)?, &fitted)?;
    Ok((reduce(&reference.matrices)?, reduce(&ins)?, reduce(&outs)?))
}

fn logit_scores(set: &EmbeddingTraceSet, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    (0..set.n_samples())
        .map(|i| {
            let logits = set
                .logits(i)
                .ok_or_else(|| Error::Data("baseline needs logits; trace set has none".into()))?;
            f(&logits)
        })
        .collect()
}

fn logit_baseline_row(cfg: &RunConfig, bench: &Benchmark, seed: u64, b: Baseline) -> ReportRow {
    let row = ReportRow::new(seed, "", b.as_str());
    let t = cfg.energy_temperature;
    let score = |l: &[f64]| match b {
        Baseline::Msp => msp_from_logits(l),
        _ => energy_score(l, t),
    };
    let scored = (|| -> Result<ScoreTriple> {
        Ok((
            logit_scores(&bench.train, score)?,
            logit_scores(&bench.in_test, score)?,
            logit_scores(&bench.out_test, score)?,
        ))
    })();
    match scored {
        Ok((train, ins, outs)) => fill_row(row, &train, &ins, &outs, cfg.threshold_proportion),
        Err(e) => row.failed(&e),
    }
}

/// Runs the whole matrix. Combination failures become error rows; loading
/// failures abort.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let bench = Benchmark {
        train: load_trace_set(&cfg.train)?,
        in_test: load_trace_set(&cfg.in_test)?,
        out_test: load_trace_set(&cfg.out_test)?,
    };
    let units: Vec<(u64, Option<ScorerKind>)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| {
            std::iter::once((s, None)).chain(cfg.scorers.iter().map(move |&k| (s, Some(k))))
        })
        .collect();
    let results: Vec<(Vec<ReportRow>, Vec<LayerRow>)> = units
        .par_iter()
        .map(|&(seed, kind)| match kind {
            Some(kind) => {
                eprintln!("[layertrace] seed {seed}: {kind}");
                run_scorer(cfg, &bench, seed, kind)
            }
            None => {
                let rows = cfg
                    .baselines
                    .iter()
                    .filter(|b| !b.per_scorer())
                    .map(|&b| logit_baseline_row(cfg, &bench, seed, b))
                    .collect();
                (rows, Vec::new())
            }
        })
        .collect();
    let mut outcome = EvalOutcome::default();
    for (rows, layers) in results {
        outcome.rows.extend(rows);
        outcome.per_layer.extend(layers);
    }
    outcome.rows.sort_by_key(ReportRow::key);
    outcome
        .per_layer
        .sort_by(|a, b| (&a.scorer, a.seed, a.layer).cmp(&(&b.scorer, b.seed, b.layer)));
    Ok(outcome)
}

/// Installs the global worker pool sized from [`THREADS_ENV`].
pub fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be an integer")))?,
        Err(_) => 0,
    };
    // a pool may already exist (tests); that is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
