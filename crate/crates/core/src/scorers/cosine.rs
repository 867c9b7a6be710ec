use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{dot, norm, Rows};

/// Bank of unit-normalised reference vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineBank {
    pub bank: Rows,
}

impl CosineBank {
    pub fn fit(points: &Rows) -> Result<Self> {
        let d = points.n_cols();
        let mut data = Vec::with_capacity(points.n_rows() * d);
        for (i, row) in points.iter_rows().enumerate() {
            let n = norm(row);
            if !(n > 0.0) {
                return Err(Error::Data(format!("zero-norm reference vector at row {i}")));
            }
            data.extend(row.iter().map(|v| v / n));
        }
        Ok(Self {
            bank: Rows::new(points.n_rows(), d, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.bank.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.bank.n_cols()
    }

    /// Negative maximum cosine similarity to the bank, optionally skipping
    /// one bank row.
    pub fn score(&self, z: &[f64], exclude: Option<usize>) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let n = norm(z);
        if !(n > 0.0) {
            return Err(Error::Data("zero-norm query for cosine similarity".into()));
        }
        let best = self
            .bank
            .iter_rows()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(_, b)| dot(b, z) / n)
            .fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            return Err(Error::Data("cosine bank is empty after exclusion".into()));
        }
        Ok(-best.clamp(-1.0, 1.0))
    }
}
