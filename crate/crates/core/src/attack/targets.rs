//! Target distributions for the notch and balanced-low-entropy objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Matrix;

/// Zero mass on the true class, uniform over the rest.
pub fn nhe_target(y: usize, classes: usize) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::config("notched target is undefined for fewer than 2 classes"));
    }
    if y >= classes {
        return Err(Error::dim(format!("label {y} with {classes} classes")));
    }
    let mut q = vec![1.0 / (classes - 1) as f64; classes];
    q[y] = 0.0;
    Ok(q)
}

pub fn nhe_targets(labels: &[usize], classes: usize) -> Result<Matrix> {
    let rows = labels
        .iter()
        .map(|&y| nhe_target(y, classes))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Moving-average confusion matrix and the derived class mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTracker {
    confusion: Matrix,
    mapping: Vec<usize>,
    rate: f64,
}

impl ConfusionTracker {
    pub fn new(classes: usize, rate: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("class mapping needs at least 2 classes"));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::config("confusion rate must lie in (0,1]"));
        }
        let confusion = Matrix::zeros(classes, classes);
        let mapping = balanced_mapping(&confusion);
        Ok(Self {
            confusion,
            mapping,
            rate,
        })
    }

    pub fn classes(&self) -> usize {
        self.mapping.len()
    }

    pub fn confusion(&self) -> &Matrix {
        &self.confusion
    }

    /// Target class for each true class.
    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    /// Mapping as a 0/1 matrix.
    pub fn mapping_matrix(&self) -> Matrix {
        let k = self.classes();
        let mut m = Matrix::zeros(k, k);
        for (y, &t) in self.mapping.iter().enumerate() {
            m.set(y, t, 1.0);
        }
        m
    }

    /// Blend in the row-normalised confusion of one batch and recompute the
    /// mapping.
    pub fn update(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::dim("predictions and labels differ in length"));
        }
        let k = self.classes();
        let mut batch = Matrix::zeros(k, k);
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= k || y >= k {
                return Err(Error::dim(format!("class index outside 0..{k}")));
            }
            batch.set(y, p, batch.get(y, p) + 1.0);
        }
        for y in 0..k {
            let total: f64 = batch.row(y).iter().sum();
            if total > 0.0 {
                for v in batch.row_mut(y) {
                    *v /= total;
                }
            }
        }
        for (c, b) in self.confusion.as_mut_slice().iter_mut().zip(batch.as_slice()) {
            *c = (1.0 - self.rate) * *c + self.rate * b;
        }
        self.mapping = balanced_mapping(&self.confusion);
        Ok(())
    }
}

/// A derangement: classes with the most off-diagonal confusion choose first,
/// each taking its most-confused still-free class. Ties prefer the cyclic
/// successor order `y+1, y+2, ..`.
fn balanced_mapping(confusion: &Matrix) -> Vec<usize> {
    let k = confusion.rows();
    let off = |y: usize| -> f64 { (0..k).filter(|&q| q != y).map(|q| confusion.get(y, q)).sum() };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| off(b).total_cmp(&off(a)).then(a.cmp(&b)));

    let mut free = vec![true; k];
    let mut mapping = vec![usize::MAX; k];
    let mut done: Vec<usize> = Vec::with_capacity(k);
    for &y in &order {
        let pick = (1..k)
            .map(|s| (y + s) % k)
            .filter(|&q| free[q])
            .fold(None, |best: Option<usize>, q| match best {
                Some(b) if confusion.get(y, b) >= confusion.get(y, q) => Some(b),
                _ => Some(q),
            });
        match pick {
            Some(q) => {
                mapping[y] = q;
                free[q] = false;
            }
            None => {
                // only column y is left: trade with the first class mapped
                let r = done[0];
                mapping[y] = mapping[r];
                mapping[r] = y;
                free[y] = false;
            }
        }
        done.push(y);
    }
    mapping
}

/// Negative entropy of the empirical class frequencies of `predictions`.
pub fn class_balance_penalty(predictions: &[usize], classes: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mut h = vec![0.0; classes];
    for &p in predictions {
        h[p] += 1.0;
    }
    let n = predictions.len() as f64;
    h.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let f = c / n;
            f * f.ln()
        })
        .sum()
}
