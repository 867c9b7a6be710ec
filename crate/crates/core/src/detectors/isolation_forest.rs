use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Rows;

pub const DEFAULT_N_TREES: usize = 100;
pub const DEFAULT_MAX_SUBSAMPLE: usize = 256;

/// Harmonic number `H(n)`, summed exactly.
fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// Average path length of an unsuccessful BST search over `n` points:
/// `c(n) = 2 (H(n-1) - (n-1)/n)`, with `c(0) = c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * (harmonic(n - 1) - (n - 1) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// Nodes in arena order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(data: &Rows, rows: Vec<usize>, max_depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow(data, rows, 0, max_depth, rng);
        tree
    }

    fn grow(
        &mut self,
        data: &Rows,
        rows: Vec<usize>,
        depth: usize,
        max_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= max_depth || rows.len() <= 1 {
            return id;
        }
        // candidate features: those with room for a value strictly inside
        // their range on this node
        let ranges: Vec<(usize, f64, f64)> = (0..data.n_cols())
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    let v = data.row(r)[f];
                    (lo.min(v), hi.max(v))
                });
                (lo.next_up() < hi).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = (0..64)
            .map(|_| rng.random_range(lo..hi))
            .find(|&v| v > lo && v < hi)
            .unwrap_or_else(|| lo.next_up());
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| data.row(r)[feature] < value);
        let left = self.grow(data, left_rows, depth + 1, max_depth, rng);
        let right = self.grow(data, right_rows, depth + 1, max_depth, rng);
        self.nodes[id] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        id
    }

    /// Depth of the leaf reached by `v`, plus `c(size)` for non-singleton
    /// leaves.
    pub fn path_length(&self, v: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if v[*feature] < *value { *left } else { *right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + average_path_length(*size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &IsolationTree, n: usize) -> usize {
            match &t.nodes[n] {
                Node::Split { left, right, .. } => 1 + rec(t, *left).max(rec(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        rec(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub n_features: usize,
    pub n_trees: usize,
    pub subsample: usize,
    pub max_depth: usize,
    /// `c(subsample)`.
    pub normalizer: f64,
    pub seed: u64,
    pub trees: Vec<IsolationTree>,
}

impl IsolationForestModel {
    /// Builds `n_trees` trees, tree `t` seeded with `seed + t` and grown on
    /// its own `subsample`-point draw without replacement.
    pub fn fit(data: &Rows, n_trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        let n = data.n_rows();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "isolation forest needs at least 2 rows, got {n}"
            )));
        }
        if n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be positive".into()));
        }
        if subsample < 2 || subsample > n {
            return Err(Error::InvalidArgument(format!(
                "subsample {subsample} must lie in 2..={n}"
            )));
        }
        let max_depth = (subsample as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let rows = sample(&mut rng, n, subsample).into_vec();
                IsolationTree::build(data, rows, max_depth, &mut rng)
            })
            .collect();
        Ok(Self {
            n_features: data.n_cols(),
            n_trees,
            subsample,
            max_depth,
            normalizer: average_path_length(subsample),
            seed,
            trees,
        })
    }

    pub fn mean_path_length(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.n_features, v.len())?;
        let total: f64 = self.trees.iter().map(|t| t.path_length(v)).sum();
        Ok(total / self.trees.len() as f64)
    }

    /// `2^(-E[h(v)] / c(psi))`; higher = more anomalous.
    pub fn score(&self, v: &[f64]) -> Result<f64> {
        Ok(self.score_from_path_length(self.mean_path_length(v)?))
    }

    pub fn score_from_path_length(&self, mean_path_length: f64) -> f64 {
        (-mean_path_length / self.normalizer).exp2()
    }
}
