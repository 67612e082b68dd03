//! Feature moments at tapped layers and the two distribution regularisers.
//!
//! Features are taken from an eval-statistics forward of the set on its
//! own, so each sample's features depend only on that sample and the set
//! moments are the per-dimension mean and population variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::forward::backward_values;
use crate::neural::{
    forward, Adjoint, LossFn, LossGrads, Matrix, ModelSpec, ParamDelta, ParamVector, RoleMask,
    StatsMode,
};

pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl LayerMoments {
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

fn check_layers(spec: &ModelSpec, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::config("no feature layers selected"));
    }
    if let Some(l) = layers.iter().find(|&&l| !spec.is_tapped(l)) {
        return Err(Error::config(format!("layer {l} is not a feature tap")));
    }
    Ok(())
}

fn moments_of(acts: &Matrix, layer: usize) -> LayerMoments {
    let (mean, var) = crate::neural::forward::column_moments(acts);
    LayerMoments { layer, mean, var }
}

/// Per-dimension set mean and variance at each layer in `layers`.
pub fn feature_moments(
    samples: &Matrix,
    spec: &ModelSpec,
    params: &ParamVector,
    layers: &[usize],
) -> Result<Vec<LayerMoments>> {
    check_layers(spec, layers)?;
    if samples.rows() < 2 {
        return Err(Error::DegenerateBatch(samples.rows()));
    }
    let trace = forward(spec, params, samples, StatsMode::EvalStats)?;
    layers
        .iter()
        .map(|&l| Ok(moments_of(trace.tap(spec, l)?, l)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    MomentMatch,
    GaussianKl,
}

/// Per-layer value and gradient with respect to the layer's activations.
fn layer_term(kind: Regularizer, acts: &Matrix, pool: &LayerMoments, beta: f64) -> (f64, Matrix, bool) {
    let n = acts.rows() as f64;
    let m = moments_of(acts, pool.layer);
    let c = acts.cols();
    let mut dmean = vec![0.0; c];
    let mut dvar = vec![0.0; c];
    let mut value = 0.0;
    let mut floored = false;
    match kind {
        Regularizer::None => {}
        Regularizer::MomentMatch => {
            for d in 0..c {
                let dm = m.mean[d] - pool.mean[d];
                value += dm * dm;
                dmean[d] = 2.0 * dm;
                let (s, sp) = (m.var[d].sqrt(), pool.var[d].sqrt());
                value += beta * (s - sp) * (s - sp);
                if s > 0.0 {
                    // dσ/dvar = 1/(2σ)
                    dvar[d] = beta * 2.0 * (s - sp) / (2.0 * s);
                }
            }
        }
        Regularizer::GaussianKl => {
            for d in 0..c {
                let vb = pool.var[d].max(VAR_FLOOR);
                let (vp, hit) = if m.var[d] < VAR_FLOOR {
                    (VAR_FLOOR, true)
                } else {
                    (m.var[d], false)
                };
                floored |= hit || pool.var[d] < VAR_FLOOR;
                let diff = pool.mean[d] - m.mean[d];
                value += 0.5 * (vp / vb).ln() + (vb + diff * diff) / (2.0 * vp) - 0.5;
                dmean[d] = -diff / vp;
                if !hit {
                    dvar[d] = 0.5 / vp - (vb + diff * diff) / (2.0 * vp * vp);
                }
            }
        }
    }
    let mut g = Matrix::zeros(acts.rows(), c);
    for i in 0..acts.rows() {
        for d in 0..c {
            let centred = acts.get(i, d) - m.mean[d];
            g.set(i, d, dmean[d] / n + dvar[d] * 2.0 * centred / n);
        }
    }
    (value, g, floored)
}

/// Distribution regulariser between the poison rows of a batch and cached
/// pool moments, averaged over layers. Rows outside `rows` receive zero
/// gradient.
#[derive(Clone, Debug)]
pub struct FeatureRegularizer {
    pub kind: Regularizer,
    pub pool: Vec<LayerMoments>,
    pub rows: Vec<usize>,
    pub beta: f64,
}

impl FeatureRegularizer {
    /// Value plus whether any variance hit the floor.
    pub fn evaluate(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<(f64, bool)> {
        let (v, _, _, floored) = self.run(spec, params, inputs, None)?;
        Ok((v, floored))
    }

    fn run(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        grads: Option<RoleMask>,
    ) -> Result<(f64, Option<ParamDelta>, Option<Matrix>, bool)> {
        if self.rows.len() < 2 {
            return Err(Error::DegenerateBatch(self.rows.len()));
        }
        let layers: Vec<usize> = self.pool.iter().map(|m| m.layer).collect();
        check_layers(spec, &layers)?;
        let x = inputs.select_rows(&self.rows);
        let trace = forward(spec, params, &x, StatsMode::EvalStats)?;
        let inv_l = 1.0 / self.pool.len() as f64;
        let mut adj = Adjoint::for_trace(&trace);
        let mut value = 0.0;
        let mut floored = false;
        for pm in &self.pool {
            let acts = trace.tap(spec, pm.layer)?;
            if acts.cols() != pm.mean.len() {
                return Err(Error::dim("pool moments do not match the layer width"));
            }
            let (v, mut g, f) = layer_term(self.kind, acts, pm, self.beta);
            value += v * inv_l;
            floored |= f;
            g.scale_in_place(inv_l);
            adj.add(pm.layer + 1, g)?;
        }
        let Some(mask) = grads else {
            return Ok((value, None, None, floored));
        };
        let (pg, ig) = backward_values(spec, params.layout(), params.values(), &trace, adj)?;
        let mut full = Matrix::zeros(inputs.rows(), inputs.cols());
        for (r, &i) in self.rows.iter().enumerate() {
            full.row_mut(i).copy_from_slice(ig.row(r));
        }
        Ok((
            value,
            Some(ParamDelta::masked(params.layout().clone(), pg, mask)),
            Some(full),
            floored,
        ))
    }
}

impl LossFn for FeatureRegularizer {
    fn name(&self) -> String {
        match self.kind {
            Regularizer::None => "no-reg",
            Regularizer::MomentMatch => "moment-match",
            Regularizer::GaussianKl => "gaussian-kl",
        }
        .into()
    }

    fn value(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<f64> {
        Ok(self.run(spec, params, inputs, None)?.0)
    }

    fn value_and_grads(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        mask: RoleMask,
    ) -> Result<LossGrads> {
        let (value, p, i, _) = self.run(spec, params, inputs, Some(mask))?;
        Ok(LossGrads {
            value,
            params: p.expect("requested"),
            inputs: i.expect("requested"),
        })
    }
}

/// `(1/L)Σ_l(‖Δμ‖² + β‖Δσ‖²)` between a poison set and pool moments.
pub fn loss_moment_reg(
    poison: &Matrix,
    pool: &[LayerMoments],
    spec: &ModelSpec,
    params: &ParamVector,
    beta: f64,
) -> Result<f64> {
    FeatureRegularizer {
        kind: Regularizer::MomentMatch,
        pool: pool.to_vec(),
        rows: (0..poison.rows()).collect(),
        beta,
    }
    .value(spec, params, poison)
}

/// Layer-averaged `KL(N(pool) ‖ N(poison))` with diagonal covariances.
/// The flag reports whether a variance was floored.
pub fn loss_gaussian_kl_reg(
    poison: &Matrix,
    pool: &[LayerMoments],
    spec: &ModelSpec,
    params: &ParamVector,
) -> Result<(f64, bool)> {
    FeatureRegularizer {
        kind: Regularizer::GaussianKl,
        pool: pool.to_vec(),
        rows: (0..poison.rows()).collect(),
        beta: 0.0,
    }
    .evaluate(spec, params, poison)
}

/// Closed-form diagonal Gaussian KL, `KL(N(m1, v1) ‖ N(m2, v2))` summed over
/// dimensions.
pub fn gaussian_kl(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    m1.iter()
        .zip(v1)
        .zip(m2.iter().zip(v2))
        .map(|((&a, &va), (&b, &vb))| {
            let (va, vb) = (va.max(VAR_FLOOR), vb.max(VAR_FLOOR));
            0.5 * (vb / va).ln() + (va + (a - b) * (a - b)) / (2.0 * vb) - 0.5
        })
        .sum()
}
