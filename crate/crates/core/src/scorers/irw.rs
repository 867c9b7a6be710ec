use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{dot, norm, Rows};

pub const DEFAULT_N_PROJ: usize = 1000;

/// Random directions on the unit sphere plus, for each point cloud, the
/// training projections onto every direction, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrwModel {
    /// `n_proj x d`, unit rows.
    pub directions: Rows,
    /// `[cloud][direction]` sorted projections.
    pub projections: Vec<Vec<Vec<f64>>>,
}

/// `n_proj` directions drawn uniformly on `S^{d-1}` as normalised Gaussians.
pub fn sample_directions(rng: &mut ChaCha8Rng, n_proj: usize, d: usize) -> Rows {
    let mut data = Vec::with_capacity(n_proj * d);
    let mut v = vec![0.0; d];
    for _ in 0..n_proj {
        loop {
            for x in v.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let n = norm(&v);
            if n > 1e-12 {
                data.extend(v.iter().map(|x| x / n));
                break;
            }
        }
    }
    Rows::new(n_proj, d, data).expect("direction buffer sized n_proj * d")
}

impl IrwModel {
    /// Projects every cloud on the given unit directions.
    pub fn with_directions(directions: Rows, clouds: &[Rows]) -> Result<Self> {
        if directions.n_rows() == 0 {
            return Err(Error::InvalidArgument("IRW needs at least one direction".into()));
        }
        let d = directions.n_cols();
        let mut projections = Vec::with_capacity(clouds.len());
        for cloud in clouds {
            check_dim(d, cloud.n_cols())?;
            if cloud.n_rows() == 0 {
                return Err(Error::Data("empty IRW point cloud".into()));
            }
            let per_dir = directions
                .iter_rows()
                .map(|u| {
                    let mut p: Vec<f64> = cloud.iter_rows().map(|z| dot(u, z)).collect();
                    p.sort_by(f64::total_cmp);
                    p
                })
                .collect();
            projections.push(per_dir);
        }
        Ok(Self {
            directions,
            projections,
        })
    }

    /// Samples `n_proj` directions from `seed` and projects the clouds.
    pub fn fit(clouds: &[Rows], n_proj: usize, seed: u64) -> Result<Self> {
        let d = clouds
            .first()
            .ok_or_else(|| Error::InvalidArgument("no IRW point clouds".into()))?
            .n_cols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_directions(sample_directions(&mut rng, n_proj, d), clouds)
    }

    pub fn n_proj(&self) -> usize {
        self.directions.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.n_cols()
    }

    pub fn n_clouds(&self) -> usize {
        self.projections.len()
    }

    /// Monte-Carlo IRW depth of `z` w.r.t. cloud `cloud`, in `[0, 1/2]`.
    ///
    /// A training point with `<u, z_i - z> <= 0` counts on the lower side,
    /// so ties go to the lower fraction.
    pub fn depth(&self, z: &[f64], cloud: usize) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let proj = self
            .projections
            .get(cloud)
            .ok_or_else(|| Error::InvalidArgument(format!("no IRW cloud {cloud}")))?;
        let mut total = 0.0;
        for (u, sorted) in self.directions.iter_rows().zip(proj) {
            let n = sorted.len();
            let p = dot(u, z);
            let below = sorted.partition_point(|&v| v <= p);
            total += below.min(n - below) as f64 / n as f64;
        }
        Ok(total / self.n_proj() as f64)
    }

    /// Anomaly score: negated depth.
    pub fn score(&self, z: &[f64], cloud: usize) -> Result<f64> {
        Ok(-self.depth(z, cloud)?)
    }
}
