use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clamp_unit, LabeledSet};
use crate::error::{Error, Result};
use crate::neural::Matrix;
use crate::rng::{derive_seed, rng_for, SimRng};

const MEAN_RADIUS: f64 = 0.25;

/// Gaussian class clusters around fixed means `0.5 + r·u_k`, `u_k` a random
/// unit vector. The means depend only on the seed, so several samples of
/// one domain can be drawn independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    means: Matrix,
    spread: f64,
}

impl SyntheticDomain {
    pub fn new(seed: u64, classes: usize, dims: usize, spread: f64) -> Result<Self> {
        if classes < 2 || dims < 2 {
            return Err(Error::config(format!(
                "synthetic domain needs K >= 2 and D >= 2, got K={classes}, D={dims}"
            )));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::config(format!("spread must be positive, got {spread}")));
        }
        let mut rng = rng_for(seed, &[crate::rng::tag::DATA, 0]);
        let mut means = Matrix::zeros(classes, dims);
        for k in 0..classes {
            let u: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (d, v) in u.iter().enumerate() {
                means.set(k, d, 0.5 + MEAN_RADIUS * v / norm);
            }
        }
        Ok(Self { means, spread })
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dims(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// `n_per_class` samples of every class, labels interleaved `0,1,..,K−1,0,..`.
    pub fn sample(&self, seed: u64, n_per_class: usize) -> Result<LabeledSet> {
        if n_per_class < 2 {
            return Err(Error::InsufficientData(format!(
                "n-per-class must be at least 2, got {n_per_class}"
            )));
        }
        let (k, d) = (self.classes(), self.dims());
        let mut rng: SimRng = rand::SeedableRng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.spread).expect("validated spread");
        let n = k * n_per_class;
        let mut x = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % k;
            labels.push(y);
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = self.means.get(y, j) + noise.sample(&mut rng);
            }
        }
        clamp_unit(&mut x);
        LabeledSet::new(x, labels, k)
    }
}

pub fn gen_source(seed: u64, classes: usize, dims: usize, n_per_class: usize) -> Result<LabeledSet> {
    SyntheticDomain::new(seed, classes, dims, 0.06)?.sample(
        derive_seed(seed, &[crate::rng::tag::DATA, 1]),
        n_per_class,
    )
}
