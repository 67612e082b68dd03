//! Standalone numeric primitives on plain matrices.

use crate::error::{Error, Result};
use crate::neural::forward::{column_moments, softmax_rows};
use crate::neural::losses::row_entropy;
use crate::neural::matrix::Matrix;

pub use crate::neural::params::param_axpy;

pub const DISTRIBUTION_TOL: f64 = 1e-5;

pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    if let Some(v) = logits.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {v}")));
    }
    Ok(softmax_rows(logits))
}

/// Per-row entropy in nats.
pub fn entropy(probs: &Matrix) -> Result<Vec<f64>> {
    probs
        .row_iter()
        .enumerate()
        .map(|(row, p)| {
            let sum: f64 = p.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > DISTRIBUTION_TOL || p.iter().any(|&v| v < 0.0)
            {
                return Err(Error::InvalidDistribution { row, sum });
            }
            Ok(row_entropy(p))
        })
        .collect()
}

/// Per-channel mean and population variance.
pub fn bn_batch_statistics(acts: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if acts.rows() < 2 {
        return Err(Error::DegenerateBatch(acts.rows()));
    }
    Ok(column_moments(acts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&m(&[vec![0.0, 0.0, 0.0]])).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&m(&[vec![0.0, 2f64.ln()]])).unwrap();
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        let p = softmax(&m(&[vec![1000.0, 0.0]])).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15 && p.get(0, 1) < 1e-300);
        assert!(matches!(
            softmax(&m(&[vec![f64::NAN, 0.0]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn entropy_cases() {
        let h = entropy(&m(&[
            vec![0.25; 4],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
        ]))
        .unwrap();
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
        assert!((h[2] - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            entropy(&m(&[vec![0.5, 0.4]])),
            Err(Error::InvalidDistribution { row: 0, .. })
        ));
    }

    #[test]
    fn batch_statistics_cases() {
        let (mu, var) = bn_batch_statistics(&m(&[vec![1.0, 5.0], vec![3.0, 5.0]])).unwrap();
        assert_eq!(mu, vec![2.0, 5.0]);
        assert_eq!(var, vec![1.0, 0.0]);
        assert!(matches!(
            bn_batch_statistics(&m(&[vec![1.0]])),
            Err(Error::DegenerateBatch(1))
        ));
    }
}
