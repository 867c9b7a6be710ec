use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::matrix::Rows;

/// Default trace-scaled covariance shrinkage.
pub const DEFAULT_SHRINKAGE: f64 = 1e-3;
/// Smallest shrinkage actually applied; `0` is raised to this.
pub const MIN_SHRINKAGE: f64 = 1e-12;
/// Floor on the covariance trace so that a zero-variance cloud still gets a
/// positive definite ridge.
pub const TRACE_FLOOR: f64 = 1e-12;

/// Mean and precision of one point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub mean: Vec<f64>,
    /// Row-major `d x d` inverse of the regularised covariance.
    pub precision: Vec<f64>,
    pub shrinkage: f64,
}

/// Maximum-likelihood mean and covariance (denominator `n`), row-major.
pub fn mean_and_covariance(points: &Rows) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (points.n_rows(), points.n_cols());
    let mut mean = vec![0.0; d];
    for row in points.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in points.iter_rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

/// `cov + max(shrinkage, MIN_SHRINKAGE) * max(tr cov, TRACE_FLOOR) / d * I`.
pub fn regularize(cov: &mut [f64], d: usize, shrinkage: f64) {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let ridge = shrinkage.max(MIN_SHRINKAGE) * trace.max(TRACE_FLOOR) / d as f64;
    for i in 0..d {
        cov[i * d + i] += ridge;
    }
}

impl MahalanobisModel {
    /// Fits on a cloud of at least two points. The error string names the
    /// failing step; callers attach layer / class context.
    pub fn fit(points: &Rows, shrinkage: f64) -> std::result::Result<Self, String> {
        if points.n_rows() < 2 {
            return Err(format!("{} points, at least 2 required", points.n_rows()));
        }
        if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
            return Err(format!("invalid shrinkage {shrinkage}"));
        }
        let d = points.n_cols();
        let (mean, mut cov) = mean_and_covariance(points);
        regularize(&mut cov, d, shrinkage);
        let chol = DMatrix::from_row_slice(d, d, &cov)
            .cholesky()
            .ok_or_else(|| "regularised covariance is not positive definite".to_string())?;
        let inv = chol.inverse();
        let mut precision = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                precision[i * d + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
        if precision.iter().any(|v| !v.is_finite()) {
            return Err("precision has non-finite entries".to_string());
        }
        Ok(Self {
            mean,
            precision,
            shrinkage,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(z - mu)^T P (z - mu)`, clamped at zero.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        let d = self.dim();
        check_dim(d, z.len())?;
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let pi: f64 = row.iter().zip(&diff).map(|(p, x)| p * x).sum();
            q += diff[i] * pi;
        }
        Ok(q.max(0.0))
    }
}
