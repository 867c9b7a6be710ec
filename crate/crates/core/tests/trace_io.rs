mod common;

use layertrace::aggregation::{agg_noref, AggregationMode, AggregationPipeline, Statistic};
use layertrace::detectors::DetectorParams;
use layertrace::metrics::auroc;
use layertrace::scorers::{build_reference_set, score_set, ScorerConfig, ScorerKind};
use layertrace::trace::{load_trace_set, save_trace_set, synth_generate, EmbeddingTraceSet, SynthConfig};
use layertrace::Error;
use proptest::prelude::*;

fn trace_set() -> impl Strategy<Value = EmbeddingTraceSet> {
    (2usize..12, 1usize..4, 1usize..5, any::<bool>(), any::<bool>()).prop_flat_map(|(n, l, d, labelled, logits)| {
        let values = prop::collection::vec(-1e6f32..1e6, n * l * d);
        let logits_dim = if logits { 1..=d } else { d..=d };
        (values, logits_dim).prop_map(move |(mut values, ld)| {
            if logits {
                for i in 0..n {
                    for j in ld..d {
                        values[(i * l + l - 1) * d + j] = 0.0;
                    }
                }
            }
            // two classes, each with at least two samples when n >= 4
            let (labels, c) = if labelled && n >= 4 {
                (Some((0..n as u32).map(|i| i % 2).collect()), 2)
            } else {
                (None, 1)
            };
            EmbeddingTraceSet::new(n, l, d, values, labels, logits.then_some(ld), c).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_is_bit_exact(set in trace_set()) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_trace_set(&set, dir.path().join("s")).unwrap();
        let back = load_trace_set(&manifest).unwrap();
        prop_assert_eq!(back.n_samples(), set.n_samples());
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(back.logits_dim(), set.logits_dim());
        let bits = |s: &EmbeddingTraceSet| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&set));
    }
}

#[test]
fn loader_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, manifest: &str, floats: &[f32]| {
        let sub = dir.path().join(name);
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::write(sub.join("manifest.json"), manifest).unwrap();
        let bytes: Vec<u8> = floats.iter().flat_map(|f| f.to_le_bytes()).collect();
        std::fs::write(sub.join("t.f32"), bytes).unwrap();
        sub.join("manifest.json")
    };
    let base = |shape: &str| {
        format!(r#"{{"tensor":"t.f32","shape":{shape},"labels":null,"has_logits":false,"logits_dim":null,"class_count":1}}"#)
    };
    let ok = write("ok", &base("[2,1,3]"), &[1., 0., 0., 0., 1., 0.]);
    let set = load_trace_set(ok).unwrap();
    assert_eq!((set.n_samples(), set.n_layers(), set.dim()), (2, 1, 3));

    let short = write("short", &base("[2,1,3]"), &[1., 0., 0., 0., 1.]);
    assert!(matches!(load_trace_set(short), Err(Error::Format(_))));
    let nan = write("nan", &base("[1,1,2]"), &[1., f32::NAN]);
    assert!(matches!(load_trace_set(nan), Err(Error::Data(_))));
    let empty = write("empty", &base("[0,1,2]"), &[]);
    assert!(load_trace_set(empty).is_err());
}

fn bench(shift: f64, seed: u64) -> layertrace::trace::SynthBench {
    synth_generate(&SynthConfig {
        n_train: 800,
        n_in_test: 1000,
        n_out_test: 1000,
        class_count: 4,
        n_layers: 5,
        dim: 8,
        informative_layer: 2,
        ood_shift: shift,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn null_shift_gives_chance_auroc() {
    let b = bench(0.0, 1);
    let scorer = ScorerConfig::new(ScorerKind::Mahalanobis);
    let fitted = scorer.fit(&b.train).unwrap();
    let reference = build_reference_set(&b.train, &fitted).unwrap();
    let (ins, outs) = (score_set(&b.in_test, &fitted).unwrap(), score_set(&b.out_test, &fitted).unwrap());
    for mode in ["mean", "if", "lof"] {
        let p = AggregationPipeline::fit(scorer.clone(), &reference, mode.parse::<AggregationMode>().unwrap(), &DetectorParams::default(), 0).unwrap();
        let a = auroc(&p.score_batch(&ins).unwrap(), &p.score_batch(&outs).unwrap()).unwrap();
        assert!((0.45..=0.55).contains(&a), "{mode}: {a}");
    }
}

#[test]
fn large_shift_is_visible_only_at_informative_layer() {
    let b = bench(10.0, 2);
    let fitted = ScorerConfig::new(ScorerKind::Mahalanobis).fit(&b.train).unwrap();
    let (ins, outs) = (score_set(&b.in_test, &fitted).unwrap(), score_set(&b.out_test, &fitted).unwrap());
    for layer in 0..5 {
        let col = |m: &[layertrace::scorers::ScoreMatrix]| -> Vec<f64> {
            m.iter().map(|s| agg_noref(s, Statistic::Coordinate(layer)).unwrap()).collect()
        };
        let a = auroc(&col(&ins), &col(&outs)).unwrap();
        if layer == 2 {
            assert!(a >= 0.99, "layer {layer}: {a}");
        } else {
            assert!((0.4..=0.6).contains(&a), "layer {layer}: {a}");
        }
    }
}

#[test]
fn null_shift_moments_agree() {
    let b = bench(0.0, 3);
    let (n, d) = (1000usize, 8usize);
    let root_n = (n as f64).sqrt();
    let moments = |s: &EmbeddingTraceSet, layer: usize| {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| s.embedding(i, layer)).collect();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let var: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64)
            .collect();
        (mean, var)
    };
    for layer in 0..5 {
        let (mi, vi) = moments(&b.in_test, layer);
        let (mo, vo) = moments(&b.out_test, layer);
        for j in 0..d {
            // each set within 3 standard errors of the shared population value
            let var = 0.5 * (vi[j] + vo[j]);
            let mean_tol = 2.0 * 3.0 * var.sqrt() / root_n;
            let var_tol = 2.0 * 3.0 * var * std::f64::consts::SQRT_2 / root_n;
            assert!((mi[j] - mo[j]).abs() <= mean_tol, "mean layer {layer} dim {j}");
            assert!((vi[j] - vo[j]).abs() <= var_tol, "var layer {layer} dim {j}");
        }
    }
}

#[test]
fn generator_is_deterministic() {
    let a = bench(6.0, 4);
    let b = bench(6.0, 4);
    assert_eq!(a.out_test.values(), b.out_test.values());
    assert_eq!(a.train.labels(), b.train.labels());
    assert_ne!(bench(6.0, 5).train.values(), a.train.values());
}
