//! Grey-box prediction of the next aggregated model from broadcast history.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::neural::{
    forward, param_axpy, Matrix, ModelSpec, ParamDelta, ParamVector, RoleMask, Rows,
    SoftTargetCe, StatsMode, TraceLoss,
};
use crate::neural::{LossFn, Objective};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillReport {
    pub round: usize,
    /// `‖θ̂ − θ‖∞` of the prediction being corrected.
    pub error_inf: f64,
    pub kl_before: f64,
    pub kl_after: f64,
    pub halvings: usize,
}

#[derive(Clone, Debug)]
struct Pending {
    round: usize,
    /// Prediction without the correction term.
    base: ParamVector,
}

#[derive(Clone, Debug)]
pub struct SurrogateState {
    k: usize,
    eta: f64,
    own_decay: f64,
    distill_lr: f64,
    history: VecDeque<(usize, ParamVector)>,
    own_est: Option<ParamDelta>,
    correction: Option<ParamDelta>,
    pending: Option<Pending>,
}

impl SurrogateState {
    /// `k` history differences, server rate `eta`.
    pub fn new(k: usize, eta: f64, own_decay: f64, distill_lr: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("surrogate history length must be at least 1"));
        }
        if eta.is_nan() || eta <= 0.0 || !(0.0..1.0).contains(&own_decay) || distill_lr < 0.0 {
            return Err(Error::config("invalid surrogate rates"));
        }
        Ok(Self {
            k,
            eta,
            own_decay,
            distill_lr,
            history: VecDeque::with_capacity(k + 1),
            own_est: None,
            correction: None,
            pending: None,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn is_ready(&self) -> bool {
        self.history.len() >= 2
    }

    pub fn correction(&self) -> Option<&ParamDelta> {
        self.correction.as_ref()
    }

    /// Record the model broadcast at the start of `round`.
    pub fn update_history(&mut self, round: usize, theta: &ParamVector) -> Result<()> {
        if let Some((r, last)) = self.history.back() {
            if round <= *r {
                return Err(Error::Protocol(format!("broadcast for round {round} after round {r}")));
            }
            if !last.same_shape(theta) {
                return Err(Error::dim("broadcast shape changed"));
            }
        }
        self.history.push_back((round, theta.clone()));
        while self.history.len() > self.k + 1 {
            self.history.pop_front();
        }
        Ok(())
    }

    fn latest(&self) -> Result<&ParamVector> {
        self.history
            .back()
            .map(|(_, t)| t)
            .ok_or(Error::SurrogateNotReady(0))
    }

    /// Mean per-round aggregate update over the history window, in delta
    /// units.
    pub fn historical_update(&self) -> Result<ParamDelta> {
        if !self.is_ready() {
            return Err(Error::SurrogateNotReady(self.history.len()));
        }
        let (r0, first) = self.history.front().expect("ready");
        let (r1, last) = self.history.back().expect("ready");
        let span = (r1 - r0) as f64;
        let diff = last.delta_from(first, RoleMask::all())?;
        Ok(diff.scaled(1.0 / (span * self.eta)))
    }

    /// Estimate of everyone else's weighted contribution.
    pub fn others_estimate(&self) -> Result<ParamDelta> {
        let mut est = self.historical_update()?;
        if let Some(own) = &self.own_est {
            est = est.add_scaled(-1.0, own)?;
        }
        if let Some(s) = &self.correction {
            est = est.add_scaled(1.0, s)?;
        }
        Ok(est)
    }

    /// Predicted next model when this attacker submits `delta` with
    /// aggregation weight `weight`.
    pub fn predict_post_agg(&self, delta: &ParamDelta, weight: f64) -> Result<ParamVector> {
        let others = self.others_estimate()?;
        let total = others.add_scaled(weight, delta)?;
        let mut out = param_axpy(self.eta, &total, self.latest()?)?;
        out.clamp_running_var();
        Ok(out)
    }

    /// Remember what was submitted this round so the next broadcast can be
    /// used to correct the estimate.
    pub fn record_submission(&mut self, round: usize, delta: &ParamDelta, weight: f64) -> Result<()> {
        let weighted = ParamDelta::masked(delta.layout().clone(), delta.scaled(weight).values().to_vec(), RoleMask::all());
        let base = if self.is_ready() {
            let mut others = self.historical_update()?;
            if let Some(own) = &self.own_est {
                others = others.add_scaled(-1.0, own)?;
            }
            let total = others.add_scaled(1.0, &weighted)?;
            Some(param_axpy(self.eta, &total, self.latest()?)?)
        } else {
            None
        };
        self.own_est = Some(match self.own_est.take() {
            None => weighted,
            Some(prev) => prev
                .scaled(self.own_decay)
                .add_scaled(1.0 - self.own_decay, &weighted)?,
        });
        self.pending = base.map(|base| Pending { round, base });
        Ok(())
    }

    fn corrected(&self, base: &ParamVector, s: &ParamDelta) -> Result<ParamVector> {
        let mut p = param_axpy(self.eta, s, base)?;
        p.clamp_running_var();
        Ok(p)
    }

    /// Fit the correction term so the last prediction's outputs on `pool`
    /// match those of the model actually broadcast in `round`.
    pub fn distill_posterior(
        &mut self,
        round: usize,
        observed: &ParamVector,
        pool: &Matrix,
        spec: &ModelSpec,
    ) -> Result<DistillReport> {
        let pending = match &self.pending {
            Some(p) if p.round + 1 == round => p.clone(),
            _ => return Err(Error::SurrogateNotReady(self.history.len())),
        };
        let target = forward(spec, observed, pool, StatsMode::EvalStats)?
            .probabilities()
            .clone();
        let self_entropy = target
            .row_iter()
            .map(crate::neural::losses::row_entropy)
            .sum::<f64>()
            / target.rows() as f64;
        let ce = TraceLoss::new(SoftTargetCe::new(target, Rows::All), StatsMode::EvalStats);
        let kl = |p: &ParamVector| -> Result<f64> { Ok(ce.value(spec, p, pool)? - self_entropy) };

        let s0 = self
            .correction
            .clone()
            .unwrap_or_else(|| ParamDelta::zeros(observed.layout().clone(), RoleMask::all()));
        let before_params = self.corrected(&pending.base, &s0)?;
        let error_inf = before_params.delta_from(observed, RoleMask::all())?.norm_inf();
        let before = kl(&before_params)?;

        let trace = forward(spec, &before_params, pool, StatsMode::EvalStats)?;
        let (_, adj) = ce.objective.evaluate(&trace)?;
        let (g, _) = crate::neural::backward(spec, &before_params, &trace, adj, RoleMask::all())?;
        let step = g.scaled(self.eta);

        let mut lr = self.distill_lr;
        let mut halvings = 0;
        let mut after = before;
        let mut accepted = None;
        while halvings <= 10 && lr > 0.0 {
            let s = s0.add_scaled(-lr, &step)?;
            let v = kl(&self.corrected(&pending.base, &s)?)?;
            if v < before {
                after = v;
                accepted = Some(s);
                break;
            }
            lr *= 0.5;
            halvings += 1;
        }
        if let Some(s) = accepted {
            self.correction = Some(s);
        }
        self.pending = None;
        Ok(DistillReport {
            round,
            error_inf,
            kl_before: before,
            kl_after: after,
            halvings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_and_theta() -> (ModelSpec, ParamVector) {
        let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
        let p = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        (spec, p)
    }

    fn shifted(p: &ParamVector, d: &ParamDelta, k: f64) -> ParamVector {
        param_axpy(k, d, p).unwrap()
    }

    fn const_delta(p: &ParamVector, v: f64) -> ParamDelta {
        ParamDelta::masked(p.layout().clone(), vec![v; p.len()], RoleMask::BN_AFFINE)
    }

    #[test]
    fn not_ready_with_one_broadcast() {
        let (_, p) = spec_and_theta();
        let mut s = SurrogateState::new(3, 1.0, 0.5, 0.1).unwrap();
        s.update_history(0, &p).unwrap();
        assert!(matches!(s.historical_update(), Err(Error::SurrogateNotReady(1))));
        assert!(s.predict_post_agg(&const_delta(&p, 0.0), 0.5).is_err());
    }

    #[test]
    fn ring_keeps_k_plus_one() {
        let (_, p) = spec_and_theta();
        let mut s = SurrogateState::new(2, 1.0, 0.5, 0.1).unwrap();
        for r in 0..6 {
            s.update_history(r, &p).unwrap();
        }
        assert_eq!(s.history_len(), 3);
        assert!(s.update_history(5, &p).is_err());
    }

    #[test]
    fn static_peers_are_predicted_exactly() {
        let (spec, theta0) = spec_and_theta();
        let eta = 0.8;
        let w = 0.25;
        let others = const_delta(&theta0, 0.01);
        let mine = const_delta(&theta0, -0.02);
        let pool = Matrix::from_vec(6, 3, (0..18).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let mut s = SurrogateState::new(3, eta, 0.5, 0.05).unwrap();
        let mut theta = theta0;
        for r in 0..8 {
            if r > 0 {
                if let Ok(rep) = s.distill_posterior(r, &theta, &pool, &spec) {
                    assert!(rep.kl_after <= rep.kl_before);
                    if r >= 3 {
                        assert!(rep.error_inf < 1e-10, "round {r}: {}", rep.error_inf);
                    }
                }
            }
            s.update_history(r, &theta).unwrap();
            if r >= 2 {
                let pred = s.predict_post_agg(&mine, w).unwrap();
                let total = others.add_scaled(w, &mine).unwrap();
                let truth = shifted(&theta, &total, eta);
                assert!(pred.delta_from(&truth, RoleMask::all()).unwrap().norm_inf() < 1e-10);
            }
            s.record_submission(r, &mine, w).unwrap();
            let total = others.add_scaled(w, &mine).unwrap();
            theta = shifted(&theta, &total, eta);
        }
    }
}
