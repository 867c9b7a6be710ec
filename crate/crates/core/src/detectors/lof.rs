use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{euclidean, Rows};

pub const DEFAULT_K: usize = 20;
/// Floor on the mean reachability distance before inversion.
pub const REACH_FLOOR: f64 = 1e-12;

/// Local Outlier Factor with Euclidean distance. Neighbour sets include every
/// point tied at the k-distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofModel {
    pub k: usize,
    pub points: Rows,
    pub k_distances: Vec<f64>,
    /// Local reachability densities of the training points.
    pub lrd: Vec<f64>,
}

/// k-distance and tie-inclusive neighbour set from a list of
/// `(index, distance)` pairs.
fn neighbourhood(mut dists: Vec<(usize, f64)>, k: usize) -> (f64, Vec<(usize, f64)>) {
    let mut sorted: Vec<f64> = dists.iter().map(|&(_, d)| d).collect();
    sorted.sort_by(f64::total_cmp);
    let k_distance = sorted[k - 1];
    dists.retain(|&(_, d)| d <= k_distance);
    (k_distance, dists)
}

fn density(neighbours: &[(usize, f64)], k_distances: &[f64]) -> f64 {
    let reach: f64 = neighbours
        .iter()
        .map(|&(j, d)| k_distances[j].max(d))
        .sum::<f64>()
        / neighbours.len() as f64;
    1.0 / reach.max(REACH_FLOOR)
}

impl LofModel {
    pub fn fit(points: &Rows, k: usize) -> Result<Self> {
        let n = points.n_rows();
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!(
                "LOF needs 1 <= k < n, got k = {k}, n = {n}"
            )));
        }
        let neighbourhoods: Vec<(f64, Vec<(usize, f64)>)> = (0..n)
            .map(|i| {
                let dists = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, euclidean(points.row(i), points.row(j))))
                    .collect();
                neighbourhood(dists, k)
            })
            .collect();
        let k_distances: Vec<f64> = neighbourhoods.iter().map(|(kd, _)| *kd).collect();
        let lrd = neighbourhoods
            .iter()
            .map(|(_, nb)| density(nb, &k_distances))
            .collect();
        Ok(Self {
            k,
            points: points.clone(),
            k_distances,
            lrd,
        })
    }

    /// LOF of a query against the training points; about 1 for inliers,
    /// above 1 for points sparser than their neighbours.
    pub fn score(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.points.n_cols(), v.len())?;
        let dists = self
            .points
            .iter_rows()
            .enumerate()
            .map(|(j, p)| (j, euclidean(v, p)))
            .collect();
        let (_, nb) = neighbourhood(dists, self.k);
        let lrd_q = density(&nb, &self.k_distances);
        let mean_lrd: f64 = nb.iter().map(|&(j, _)| self.lrd[j]).sum::<f64>() / nb.len() as f64;
        Ok(mean_lrd / lrd_q)
    }
}
