//! Basic objectives over a forward trace: entropy and cross-entropy variants.
//! Attack objectives build on these in the attack module.

use crate::error::{Error, Result};
use crate::neural::forward::{Adjoint, ForwardTrace, Objective};
use crate::neural::matrix::Matrix;
use crate::neural::scalar::Real;

/// Which batch rows an objective averages over.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Rows {
    #[default]
    All,
    Subset(Vec<usize>),
}

impl Rows {
    pub fn indices(&self, batch: usize) -> Vec<usize> {
        match self {
            Rows::All => (0..batch).collect(),
            Rows::Subset(idx) => idx.clone(),
        }
    }

    fn checked(&self, batch: usize) -> Result<Vec<usize>> {
        let idx = self.indices(batch);
        if let Some(&bad) = idx.iter().find(|&&i| i >= batch) {
            return Err(Error::dim(format!("row {bad} outside batch of {batch}")));
        }
        if idx.is_empty() {
            return Err(Error::InsufficientData("objective over zero rows".into()));
        }
        Ok(idx)
    }
}

/// `−Σ p ln p` of one row with `0·ln 0 = 0`.
pub(crate) fn row_entropy<T: Real>(p: &[T]) -> T {
    let mut h = T::zero();
    for &v in p {
        if v.re() > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Mean Shannon entropy of the predicted distribution.
#[derive(Clone, Debug, Default)]
pub struct MeanEntropy {
    pub rows: Rows,
}

impl<T: Real> Objective<T> for MeanEntropy {
    fn name(&self) -> String {
        "entropy".into()
    }

    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        let probs = trace.probabilities();
        let idx = self.rows.checked(probs.rows())?;
        let k = probs.cols();
        let inv_n = 1.0 / idx.len() as f64;
        let mut g = Matrix::zeros(probs.rows(), k);
        let mut total = T::zero();
        for &i in &idx {
            let p = probs.row(i);
            let h = row_entropy(p);
            total += h;
            let gi = g.row_mut(i);
            for j in 0..k {
                if p[j].re() > 0.0 {
                    gi[j] = -(p[j] * (p[j].ln() + h)).scale(inv_n);
                }
            }
        }
        let mut adj = Adjoint::for_trace(trace);
        adj.add_logits(g)?;
        Ok((total.scale(inv_n), adj))
    }
}

/// Mean cross-entropy `−Σ_j q_j ln p_j` against per-row soft targets.
/// `targets` row `r` pairs with the `r`-th selected batch row.
#[derive(Clone, Debug)]
pub struct SoftTargetCe {
    pub targets: Matrix,
    pub rows: Rows,
    pub label: &'static str,
}

impl SoftTargetCe {
    pub fn new(targets: Matrix, rows: Rows) -> Self {
        Self {
            targets,
            rows,
            label: "soft-ce",
        }
    }

    /// One-hot targets from labels.
    pub fn from_labels(labels: &[usize], classes: usize, rows: Rows) -> Result<Self> {
        let mut t = Matrix::zeros(labels.len(), classes);
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::dim(format!("label {y} with {classes} classes")));
            }
            t.set(r, y, 1.0);
        }
        Ok(Self {
            targets: t,
            rows,
            label: "ce",
        })
    }
}

pub(crate) fn soft_ce<T: Real>(
    trace: &ForwardTrace<T>,
    targets: &Matrix,
    rows: &Rows,
) -> Result<(T, Adjoint<T>)> {
    let probs = trace.probabilities();
    let idx = rows.checked(probs.rows())?;
    let k = probs.cols();
    if targets.rows() != idx.len() || targets.cols() != k {
        return Err(Error::dim(format!(
            "targets {}x{} for {} rows of {k} classes",
            targets.rows(),
            targets.cols(),
            idx.len()
        )));
    }
    let inv_n = 1.0 / idx.len() as f64;
    let mut g = Matrix::zeros(probs.rows(), k);
    let mut total = T::zero();
    for (r, &i) in idx.iter().enumerate() {
        let p = probs.row(i);
        let q = targets.row(r);
        let qsum: f64 = q.iter().sum();
        let gi = g.row_mut(i);
        for j in 0..k {
            if q[j] != 0.0 {
                total -= p[j].ln().scale(q[j]);
            }
            gi[j] += (p[j].scale(qsum) - T::from_f64(q[j])).scale(inv_n);
        }
    }
    let mut adj = Adjoint::for_trace(trace);
    adj.add_logits(g)?;
    Ok((total.scale(inv_n), adj))
}

impl<T: Real> Objective<T> for SoftTargetCe {
    fn name(&self) -> String {
        self.label.into()
    }

    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        soft_ce(trace, &self.targets, &self.rows)
    }
}

/// A loss that ignores its inputs.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl<T: Real> Objective<T> for Constant {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        Ok((T::from_f64(self.0), Adjoint::for_trace(trace)))
    }
}

/// Top-1 error rate. Piecewise constant, so it is registered as
/// non-differentiable and gradient requests are refused.
#[derive(Clone, Debug)]
pub struct ZeroOneError {
    pub labels: Vec<usize>,
}

impl<T: Real> Objective<T> for ZeroOneError {
    fn name(&self) -> String {
        "zero-one".into()
    }

    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        let pred = trace.predictions();
        if pred.len() != self.labels.len() {
            return Err(Error::dim("label count differs from batch size"));
        }
        let wrong = pred.iter().zip(&self.labels).filter(|(a, b)| a != b).count();
        Ok((
            T::from_f64(wrong as f64 / pred.len() as f64),
            Adjoint::for_trace(trace),
        ))
    }

    fn differentiable(&self) -> bool {
        false
    }
}

/// Weighted sum of objectives on the same trace.
pub struct SumObjective<T: Real = f64> {
    terms: Vec<(f64, Box<dyn Objective<T>>)>,
}

impl<T: Real> Default for SumObjective<T> {
    fn default() -> Self {
        Self { terms: Vec::new() }
    }
}

impl<T: Real> SumObjective<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, weight: f64, obj: impl Objective<T> + 'static) -> Self {
        self.terms.push((weight, Box::new(obj)));
        self
    }
}

impl<T: Real> Objective<T> for SumObjective<T> {
    fn name(&self) -> String {
        self.terms
            .iter()
            .map(|(w, o)| format!("{w}*{}", o.name()))
            .collect::<Vec<_>>()
            .join(" + ")
    }

    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        let mut total = T::zero();
        let mut adj = Adjoint::for_trace(trace);
        for (w, o) in &self.terms {
            let (v, a) = o.evaluate(trace)?;
            total += v.scale(*w);
            adj.merge(a, *w)?;
        }
        Ok((total, adj))
    }

    fn differentiable(&self) -> bool {
        self.terms.iter().all(|(_, o)| o.differentiable())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::forward::{forward, grad_inputs, grad_params, StatsMode, TraceLoss};
    use crate::neural::params::{ParamVector, RoleMask};
    use crate::neural::spec::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelSpec, ParamVector, Matrix) {
        let spec = ModelSpec::mlp(5, &[8], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ParamVector::init(&spec, &mut rng);
        let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.gen::<f64>()).collect()).unwrap();
        (spec, p, x)
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let (spec, p, x) = setup();
        let loss = TraceLoss::new(Constant(2.5), StatsMode::TrainStats);
        let g = grad_params(&spec, &p, &x, &loss, RoleMask::all()).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let gi = grad_inputs(&spec, &p, &x, &loss).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_one_is_refused() {
        let (spec, p, x) = setup();
        let loss = TraceLoss::new(
            ZeroOneError {
                labels: vec![0; 6],
            },
            StatsMode::EvalStats,
        );
        let err = grad_params(&spec, &p, &x, &loss, RoleMask::all()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLoss(_)));
    }

    #[test]
    fn bn_affine_mask_leaves_weights_zero() {
        let (spec, p, x) = setup();
        let loss = TraceLoss::new(MeanEntropy::default(), StatsMode::TrainStats);
        let g = grad_params(&spec, &p, &x, &loss, RoleMask::BN_AFFINE).unwrap();
        for s in p.layout().slots() {
            let inside = RoleMask::BN_AFFINE.contains(s.role.mask());
            let zero = g.values()[s.range()].iter().all(|&v| v == 0.0);
            assert!(inside || zero, "{:?} leaked", s.role);
        }
        assert!(g.norm() > 0.0);
    }

    #[test]
    fn doubling_the_loss_doubles_the_input_gradient() {
        let (spec, p, x) = setup();
        let one = TraceLoss::new(MeanEntropy::default(), StatsMode::TrainStats);
        let two = TraceLoss::new(
            SumObjective::new().with(2.0, MeanEntropy::default()),
            StatsMode::TrainStats,
        );
        let g1 = grad_inputs(&spec, &p, &x, &one).unwrap();
        let g2 = grad_inputs(&spec, &p, &x, &two).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ce_to_uniform_equals_entropy_bound() {
        let (spec, p, x) = setup();
        let trace = forward(&spec, &p, &x, StatsMode::EvalStats).unwrap();
        let ce = SoftTargetCe::new(Matrix::filled(6, 3, 1.0 / 3.0), Rows::All);
        let (v, _) = Objective::<f64>::evaluate(&ce, &trace).unwrap();
        let (h, _) = Objective::<f64>::evaluate(&MeanEntropy::default(), &trace).unwrap();
        // cross-entropy to uniform never undercuts entropy
        assert!(v >= h - 1e-12);
    }
}
