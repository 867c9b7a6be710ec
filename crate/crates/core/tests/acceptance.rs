//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::Command;
use std::time::Instant;

use rand::Rng;

use common::*;
use layertrace::aggregation::{select_threshold, AggregationMode, AggregationPipeline, Statistic};
use layertrace::baselines::{single_layer_detector, LayerSelector};
use layertrace::detectors::{DetectorKind, DetectorParams, IsolationForestModel, LofModel};
use layertrace::matrix::Rows;
use layertrace::metrics::{self, auroc, Positive};
use layertrace::scorers::{
    build_reference_set, build_score_matrix, score_set, IrwModel, MahalanobisModel, ScorerConfig,
    ScorerKind,
};
use layertrace::trace::{save_trace_set, synth_generate, DenseEmbeddings, SynthConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_gap() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for seed in 0..5u64 {
        let start = Instant::now();
        let cfg = SynthConfig {
            class_count: 4,
            n_layers: 8,
            dim: 16,
            n_train: 2000,
            n_in_test: 1000,
            n_out_test: 1000,
            informative_layer: 3,
            ood_shift: 6.0,
            noise_scale: 1.0,
            seed,
            ..SynthConfig::default()
        };
        let bench = synth_generate(&cfg).unwrap();
        let scorer = ScorerConfig { seed, ..ScorerConfig::new(ScorerKind::Mahalanobis) };
        let fitted = scorer.fit(&bench.train).unwrap();
        let reference = build_reference_set(&bench.train, &fitted).unwrap();
        let ins = score_set(&bench.in_test, &fitted).unwrap();
        let outs = score_set(&bench.out_test, &fitted).unwrap();

        let mut oracle = 0.0f64;
        for layer in 0..fitted.n_layers() {
            let coord = |m: &[layertrace::scorers::ScoreMatrix]| -> Vec<f64> {
                m.iter()
                    .map(|s| layertrace::aggregation::agg_noref(s, Statistic::Coordinate(layer)).unwrap())
                    .collect()
            };
            oracle = oracle.max(auroc(&coord(&ins), &coord(&outs)).unwrap());
        }

        let pipeline = AggregationPipeline::fit(
            scorer.clone(),
            &reference,
            AggregationMode::DataDriven(DetectorKind::IsolationForest),
            &DetectorParams::default(),
            seed,
        )
        .unwrap();
        let agg = auroc(&pipeline.score_batch(&ins).unwrap(), &pipeline.score_batch(&outs).unwrap()).unwrap();

        let last = single_layer_detector(&bench.train, &scorer, LayerSelector::LastEncoder).unwrap();
        let last_auroc = auroc(
            &last.pipeline.score_batch(&score_set(&bench.in_test, &last.scorer).unwrap()).unwrap(),
            &last.pipeline.score_batch(&score_set(&bench.out_test, &last.scorer).unwrap()).unwrap(),
        )
        .unwrap();
        let secs = start.elapsed().as_secs_f64();

        let ok = oracle >= 0.95 && agg >= oracle - 0.05 && last_auroc <= oracle - 0.15 && secs <= 60.0;
        pass &= ok;
        notes.push(format!(
            "seed {seed}: oracle {oracle:.4} maha+if {agg:.4} (need >= {:.4}) last {last_auroc:.4} {secs:.1}s",
            oracle - 0.05
        ));
    }
    outcome(pass, notes.join("; "))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n_in = r.random_range(1..=100);
        let n_out = r.random_range(1..=100);
        let levels = match case % 3 {
            0 => None,
            1 => Some(3),
            _ => Some(r.random_range(1..20)),
        };
        let ins = random_scores(&mut r, n_in, levels);
        let outs = random_scores(&mut r, n_out, levels);
        let pairs = [
            (metrics::auroc(&ins, &outs).unwrap(), bf_auroc(&ins, &outs)),
            (metrics::fpr_at_tpr(&ins, &outs, 0.95).unwrap(), bf_fpr_at_tpr(&ins, &outs, 0.95)),
            (metrics::detection_error(&ins, &outs).unwrap(), bf_detection_error(&ins, &outs)),
            (metrics::aupr(&ins, &outs, Positive::Out).unwrap(), bf_aupr_out(&ins, &outs)),
            (metrics::aupr(&ins, &outs, Positive::In).unwrap(), bf_aupr_in(&ins, &outs)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max abs deviation {worst:e} over 500 instances"))
}

fn mahalanobis_correctness() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut center_ok = true;
    for _ in 0..100 {
        let d = r.random_range(1..=32);
        let n = d + r.random_range(2..40);
        let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| gaussian(&mut r)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let g: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
                (0..d).map(|i| (0..d).map(|j| mix[i][j] * g[j]).sum::<f64>() + 3.0).collect()
            })
            .collect();
        let model = MahalanobisModel::fit(&Rows::from_rows(&points).unwrap(), 1e-3).unwrap();
        for _ in 0..5 {
            let z: Vec<f64> = (0..d).map(|_| 3.0 + 2.0 * gaussian(&mut r)).collect();
            let (a, b) = (model.score(&z).unwrap(), bf_mahalanobis(&points, 1e-3, &z));
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
        center_ok &= model.score(&model.mean.clone()).unwrap() == 0.0;
    }
    outcome(
        worst <= 1e-8 && center_ok,
        format!("max relative deviation {worst:e}; score at mean is 0: {center_ok}"),
    )
}

fn irw_behaviour() -> Outcome {
    let mut r = rng(4);
    let (n, d) = (200, 8);
    let values: Vec<f64> = (0..n * d).map(|_| gaussian(&mut r)).collect();
    let set = DenseEmbeddings::new(n, 1, d, values, Some(vec![0; n]), 1).unwrap();
    let queries: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..d).map(|_| 1.5 * gaussian(&mut r)).collect())
        .collect();
    let mut per_query = vec![Vec::new(); queries.len()];
    let mut in_range = true;
    for seed in 0..10 {
        let cfg = ScorerConfig { n_proj: 1000, seed, ..ScorerConfig::new(ScorerKind::Irw) };
        let fitted = cfg.fit(&set).unwrap();
        for (q, z) in queries.iter().enumerate() {
            let s = fitted.score(z, 0, 0, None).unwrap();
            in_range &= (-0.5..=0.0).contains(&s);
            per_query[q].push(s);
        }
    }
    let max_std = per_query
        .iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        })
        .fold(0.0, f64::max);

    let points: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| gaussian(&mut r)).collect()).collect();
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            let a = 0.7 + 1.9 * k as f64;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let model = IrwModel::with_directions(Rows::from_rows(&dirs).unwrap(), &[Rows::from_rows(&points).unwrap()]).unwrap();
    let mut exact = true;
    for _ in 0..200 {
        let z = vec![gaussian(&mut r), gaussian(&mut r)];
        exact &= model.depth(&z, 0).unwrap() == bf_irw_depth(&points, &dirs, &z);
    }
    for p in &points {
        exact &= model.depth(p, 0).unwrap() == bf_irw_depth(&points, &dirs, p);
    }
    outcome(
        max_std <= 0.02 && in_range && exact,
        format!("max std {max_std:.4}; depth in [0, 0.5]: {in_range}; brute force exact: {exact}"),
    )
}

fn detector_correctness() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(3..=12);
        let m = r.random_range(1..=3);
        let k = r.random_range(1..n);
        // a coarse grid forces duplicate distances and k-distance ties
        let grid = r.random_bool(0.5);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..m)
                .map(|_| if grid { f64::from(r.random_range(0..4)) } else { gaussian(r) })
                .collect()
        };
        let train: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut r)).collect();
        let model = LofModel::fit(&Rows::from_rows(&train).unwrap(), k).unwrap();
        for _ in 0..5 {
            let q = draw(&mut r);
            let (a, b) = (model.score(&q).unwrap(), bf_lof(&train, k, &q));
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let mut wins = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let mut pts: Vec<Vec<f64>> = (0..100).map(|_| vec![gaussian(&mut r), gaussian(&mut r)]).collect();
        pts.push(vec![20.0, 0.0]);
        let model = IsolationForestModel::fit(&Rows::from_rows(&pts).unwrap(), 100, 101, seed).unwrap();
        let outlier = model.score(&pts[100]).unwrap();
        if pts[..100].iter().all(|p| model.score(p).unwrap() < outlier) {
            wins += 1;
        }
    }
    outcome(
        worst <= 1e-9 && wins >= 95,
        format!("LOF max deviation {worst:e}; IF outlier strictly highest in {wins}/100"),
    )
}

fn last_layer_reduction() -> Outcome {
    let cfg = SynthConfig {
        n_train: 600,
        n_in_test: 10,
        n_out_test: 10,
        class_count: 3,
        n_layers: 4,
        dim: 6,
        informative_layer: 1,
        seed: 11,
        ..SynthConfig::default()
    };
    let train = synth_generate(&cfg).unwrap().train;
    let scorer = ScorerConfig::new(ScorerKind::Mahalanobis);
    let det = single_layer_detector(&train, &scorer, LayerSelector::LastEncoder).unwrap();
    let last = train.last_encoder_layer().unwrap();
    let direct_models: Vec<MahalanobisModel> = (0..cfg.class_count)
        .map(|y| {
            let rows: Vec<Vec<f64>> = train.class_indices(y).into_iter().map(|i| train.embedding(i, last)).collect();
            MahalanobisModel::fit(&Rows::from_rows(&rows).unwrap(), scorer.shrinkage).unwrap()
        })
        .collect();
    let mut r = rng(6);
    let mut identical = 0;
    for _ in 0..1000 {
        let trace: Vec<Vec<f64>> = (0..cfg.n_layers)
            .map(|_| (0..cfg.dim).map(|_| 3.0 * gaussian(&mut r)).collect())
            .collect();
        let via_pipeline = det.pipeline.score(&build_score_matrix(&trace, &det.scorer).unwrap()).unwrap();
        let direct = direct_models
            .iter()
            .map(|m| m.score(&trace[last]).unwrap())
            .fold(f64::INFINITY, f64::min);
        if via_pipeline.to_bits() == direct.to_bits() {
            identical += 1;
        }
    }
    outcome(identical == 1000, format!("{identical}/1000 queries bit-identical"))
}

fn calibration() -> Outcome {
    let mut r = rng(7);
    let scores: Vec<f64> = (0..5000).map(|_| gaussian(&mut r)).collect();
    let gamma = select_threshold(&scores, 0.8).unwrap();
    let frac = scores.iter().filter(|&&s| s > gamma).count() as f64 / 5000.0;
    outcome((0.198..=0.202).contains(&frac), format!("fraction above threshold {frac}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth_generate(&SynthConfig {
        n_train: 400,
        n_in_test: 150,
        n_out_test: 150,
        n_layers: 4,
        dim: 6,
        informative_layer: 2,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    save_trace_set(&bench.train, dir.path().join("train")).unwrap();
    save_trace_set(&bench.in_test, dir.path().join("in")).unwrap();
    save_trace_set(&bench.out_test, dir.path().join("out")).unwrap();
    let run = |name: &str, threads: &str| -> Vec<u8> {
        let cfg = serde_json::json!({
            "train": "train/manifest.json",
            "in_test": "in/manifest.json",
            "out_test": "out/manifest.json",
            "output_dir": name,
            "scorers": ["mahalanobis", "irw", "cosine"],
            "aggregators": ["if", "lof", "mean", "global:if", "agg_maha"],
            "baselines": ["last_layer", "pw"],
            "seeds": [0, 1],
            "n_proj": 200
        });
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_layertrace"))
            .args(["eval", "--config"])
            .arg(&path)
            .env("LAYERTRACE_THREADS", threads)
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "eval exited with {status}");
        std::fs::read(dir.path().join(name).join("report.csv")).unwrap()
    };
    let (a, b) = (run("run_a", "1"), run("run_b", "4"));
    outcome(a == b && !a.is_empty(), format!("report.csv {} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle gap on the synthetic benchmark", oracle_gap),
        ("metrics match brute force", metric_oracles),
        ("mahalanobis matches a direct solve", mahalanobis_correctness),
        ("irw monte-carlo behaviour", irw_behaviour),
        ("lof and isolation forest correctness", detector_correctness),
        ("coordinate(last) reduces to last-layer mahalanobis", last_layer_reduction),
        ("threshold calibration", calibration),
        ("eval determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} - {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
