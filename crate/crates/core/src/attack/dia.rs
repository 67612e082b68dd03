//! Benign cross-entropy after one unrolled entropy-minimisation step.
//!
//! For `θ' = θ − lr·M∇θH(X;θ)` and `L = CE(X; θ')` the total derivatives
//! need one Hessian-vector product with `u = M·∂L/∂θ'`, taken here as the
//! tangent of a dual-number gradient pass at `θ + εu`.

use crate::error::{Error, Result};
use crate::neural::forward::{backward_values, forward_values};
use crate::neural::{
    forward, Dual, LossFn, LossGrads, Matrix, MeanEntropy, ModelSpec, Objective, ParamDelta,
    ParamVector, RoleMask, Rows, SoftTargetCe, StatsMode,
};

#[derive(Clone, Debug)]
pub struct DiaLoss {
    pub benign_rows: Vec<usize>,
    pub benign_labels: Vec<usize>,
    pub classes: usize,
    pub inner_lr: f64,
}

impl DiaLoss {
    fn ce(&self) -> Result<SoftTargetCe> {
        if self.benign_rows.is_empty() {
            return Err(Error::config("unrolled loss needs benign rows"));
        }
        SoftTargetCe::from_labels(&self.benign_labels, self.classes, Rows::Subset(self.benign_rows.clone()))
    }

    /// Parameters after the inner adaptation step.
    pub fn adapted(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<ParamVector> {
        let trace = forward(spec, params, inputs, StatsMode::TrainStats)?;
        let (_, adj) = MeanEntropy::default().evaluate(&trace)?;
        let (g, _) = backward_values(spec, params.layout(), params.values(), &trace, adj)?;
        let inside = params.layout().coordinate_mask(RoleMask::BN_AFFINE);
        let mut out = params.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            if inside[i] {
                *v -= self.inner_lr * g[i];
            }
        }
        Ok(out)
    }
}

impl LossFn for DiaLoss {
    fn name(&self) -> String {
        "dia".into()
    }

    fn value(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<f64> {
        let ce = self.ce()?;
        let adapted = self.adapted(spec, params, inputs)?;
        let trace = forward(spec, &adapted, inputs, StatsMode::TrainStats)?;
        Ok(ce.evaluate(&trace)?.0)
    }

    fn value_and_grads(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        mask: RoleMask,
    ) -> Result<LossGrads> {
        let ce = self.ce()?;
        let adapted = self.adapted(spec, params, inputs)?;
        let outer = forward(spec, &adapted, inputs, StatsMode::TrainStats)?;
        let (value, adj) = ce.evaluate(&outer)?;
        let (v, dx_direct) = backward_values(spec, adapted.layout(), adapted.values(), &outer, adj)?;

        let inside = params.layout().coordinate_mask(RoleMask::BN_AFFINE);
        let theta: Vec<Dual> = params
            .values()
            .iter()
            .zip(&v)
            .zip(&inside)
            .map(|((&t, &vi), &m)| Dual::new(t, if m { vi } else { 0.0 }))
            .collect();
        let x = inputs.map(|a| Dual::new(a, 0.0));
        let trace = forward_values(spec, params.layout(), &theta, &x, StatsMode::TrainStats)?;
        let (_, adj) = MeanEntropy::default().evaluate(&trace)?;
        let (pg, ig) = backward_values(spec, params.layout(), &theta, &trace, adj)?;

        let dtheta: Vec<f64> = v
            .iter()
            .zip(&pg)
            .map(|(&vi, h)| vi - self.inner_lr * h.eps)
            .collect();
        let mut dx = dx_direct;
        for (d, h) in dx.as_mut_slice().iter_mut().zip(ig.as_slice()) {
            *d -= self.inner_lr * h.eps;
        }
        Ok(LossGrads {
            value,
            params: ParamDelta::masked(params.layout().clone(), dtheta, mask),
            inputs: dx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelSpec, ParamVector, Matrix, DiaLoss) {
        let spec = ModelSpec::mlp(3, &[4], 3).unwrap();
        let p = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        let x = Matrix::from_vec(5, 3, (0..15).map(|i| ((i * 5) % 7) as f64 / 7.0).collect()).unwrap();
        let loss = DiaLoss {
            benign_rows: vec![0, 1, 2],
            benign_labels: vec![0, 1, 2],
            classes: 3,
            inner_lr: 0.5,
        };
        (spec, p, x, loss)
    }

    #[test]
    fn zero_inner_rate_is_plain_benign_ce() {
        let (spec, p, x, mut loss) = setup();
        loss.inner_lr = 0.0;
        let ce = SoftTargetCe::from_labels(&[0, 1, 2], 3, Rows::Subset(vec![0, 1, 2])).unwrap();
        let t = forward(&spec, &p, &x, StatsMode::TrainStats).unwrap();
        let direct = ce.evaluate(&t).unwrap().0;
        assert!((loss.value(&spec, &p, &x).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn unrolled_input_gradient_matches_differences() {
        let (spec, p, x, loss) = setup();
        let g = loss.value_and_grads(&spec, &p, &x, RoleMask::all()).unwrap();
        for i in 0..5 {
            for d in 0..3 {
                let mut a = x.clone();
                let mut b = x.clone();
                a.set(i, d, x.get(i, d) + 1e-5);
                b.set(i, d, x.get(i, d) - 1e-5);
                let fd = (loss.value(&spec, &p, &a).unwrap() - loss.value(&spec, &p, &b).unwrap()) / 2e-5;
                let an = g.inputs.get(i, d);
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn unrolled_param_gradient_matches_differences() {
        let (spec, p, x, loss) = setup();
        let g = loss.value_and_grads(&spec, &p, &x, RoleMask::TRAINABLE).unwrap();
        let inside = p.layout().coordinate_mask(RoleMask::TRAINABLE);
        for (i, _) in inside.iter().enumerate().filter(|(_, &m)| m) {
            let mut a = p.clone();
            let mut b = p.clone();
            a.values_mut()[i] += 1e-5;
            b.values_mut()[i] -= 1e-5;
            let fd = (loss.value(&spec, &a, &x).unwrap() - loss.value(&spec, &b, &x).unwrap()) / 2e-5;
            let an = g.params.values()[i];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0), "coord {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn no_benign_rows_is_an_error() {
        let (spec, p, x, mut loss) = setup();
        loss.benign_rows.clear();
        loss.benign_labels.clear();
        assert!(loss.value(&spec, &p, &x).is_err());
    }
}
