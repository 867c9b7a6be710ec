//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracles share no code with the crate
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Scores with many ties when `levels` is small.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, levels: Option<u32>) -> Vec<f64> {
    (0..n)
        .map(|_| match levels {
            Some(k) => f64::from(rng.random_range(0..k)),
            None => gaussian(rng),
        })
        .collect()
}

pub fn bf_auroc(ins: &[f64], outs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &o in outs {
        for &i in ins {
            acc += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (ins.len() * outs.len()) as f64
}

/// Thresholds placed between consecutive distinct values and outside both
/// ends, so every achievable split is visited exactly once.
fn split_points(ins: &[f64], outs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = ins.iter().chain(outs).copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    let mut t = vec![v[0] - 1.0];
    for w in v.windows(2) {
        t.push(0.5 * (w[0] + w[1]));
    }
    t.push(v[v.len() - 1] + 1.0);
    t
}

fn above(v: &[f64], t: f64) -> f64 {
    v.iter().filter(|&&x| x > t).count() as f64
}

pub fn bf_fpr_at_tpr(ins: &[f64], outs: &[f64], tpr: f64) -> f64 {
    let mut best = f64::INFINITY;
    for t in split_points(ins, outs) {
        if above(outs, t) / outs.len() as f64 >= tpr {
            best = best.min(above(ins, t) / ins.len() as f64);
        }
    }
    best
}

pub fn bf_detection_error(ins: &[f64], outs: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for t in split_points(ins, outs) {
        let fpr = above(ins, t) / ins.len() as f64;
        let fnr = (outs.len() as f64 - above(outs, t)) / outs.len() as f64;
        best = best.min(0.5 * fpr + 0.5 * fnr);
    }
    best
}

/// Average precision with positives `pos` and negatives `neg`, predicted
/// positive when the score is at least the threshold.
pub fn bf_average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&x| x >= t).count() as f64;
        let fp = neg.iter().filter(|&&x| x >= t).count() as f64;
        let recall = tp / pos.len() as f64;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    ap
}

pub fn bf_aupr_out(ins: &[f64], outs: &[f64]) -> f64 {
    bf_average_precision(outs, ins)
}

pub fn bf_aupr_in(ins: &[f64], outs: &[f64]) -> f64 {
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    bf_average_precision(&neg(ins), &neg(outs))
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
        let mut row = r.clone();
        row.push(bi);
        row
    }).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// ML mean and covariance with the trace-scaled ridge used by the scorer.
pub fn regularised_cov(points: &[Vec<f64>], shrinkage: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for j in 0..d {
            mean[j] += p[j] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let tr: f64 = (0..d).map(|i| cov[i][i]).sum();
    let ridge = shrinkage.max(1e-12) * tr.max(1e-12) / d as f64;
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += ridge;
    }
    (mean, cov)
}

pub fn bf_mahalanobis(points: &[Vec<f64>], shrinkage: f64, z: &[f64]) -> f64 {
    let (mean, cov) = regularised_cov(points, shrinkage);
    let diff: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let x = lu_solve(&cov, &diff);
    diff.iter().zip(&x).map(|(a, b)| a * b).sum()
}

/// IRW depth as the literal double loop over directions and points.
pub fn bf_irw_depth(points: &[Vec<f64>], directions: &[Vec<f64>], z: &[f64]) -> f64 {
    let n = points.len() as f64;
    let mut total = 0.0;
    for u in directions {
        let (mut le, mut gt) = (0.0, 0.0);
        for p in points {
            let g: f64 = u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
                - u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            if g <= 0.0 {
                le += 1.0;
            } else {
                gt += 1.0;
            }
        }
        total += f64::min(le / n, gt / n);
    }
    total / directions.len() as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// LOF from the textbook definitions: k-distance, tie-inclusive
/// neighbourhoods, reachability `max(k-dist(o), d(p, o))`, and
/// `lrd = 1 / mean reachability`. Training neighbourhoods exclude the point
/// itself; a query is compared against every training point.
pub fn bf_lof(train: &[Vec<f64>], k: usize, query: &[f64]) -> f64 {
    let neighbours = |p: &[f64], skip: Option<usize>| -> (f64, Vec<usize>) {
        let mut ds: Vec<(usize, f64)> = train
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, o)| (i, dist(p, o)))
            .collect();
        ds.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let kd = ds[k - 1].1;
        (kd, ds.iter().filter(|(_, d)| *d <= kd).map(|(i, _)| *i).collect())
    };
    let kdist: Vec<f64> = (0..train.len()).map(|i| neighbours(&train[i], Some(i)).0).collect();
    let lrd = |p: &[f64], nb: &[usize]| -> f64 {
        let mean: f64 = nb.iter().map(|&o| kdist[o].max(dist(p, &train[o]))).sum::<f64>() / nb.len() as f64;
        1.0 / mean.max(1e-12)
    };
    let train_lrd: Vec<f64> = (0..train.len())
        .map(|i| lrd(&train[i], &neighbours(&train[i], Some(i)).1))
        .collect();
    let (_, nq) = neighbours(query, None);
    let lq = lrd(query, &nq);
    nq.iter().map(|&o| train_lrd[o]).sum::<f64>() / (nq.len() as f64 * lq)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}
