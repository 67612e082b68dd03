//! Per-client test-time adaptation: BN-statistics refresh, entropy
//! minimisation over BN affine parameters, and a small mean-teacher variant.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::neural::{
    backward, forward, Adjoint, ForwardTrace, Matrix, MeanEntropy, ModelSpec, Objective,
    ParamDelta, ParamRole, ParamVector, RoleMask, SoftTargetCe, StatsMode,
};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaMethod {
    None,
    BnStats,
    Tent,
    CottaLite,
}

impl TtaMethod {
    /// Roles moved by gradient steps.
    pub fn trainable(self) -> RoleMask {
        match self {
            TtaMethod::None | TtaMethod::BnStats => RoleMask::empty(),
            TtaMethod::Tent => RoleMask::BN_AFFINE,
            TtaMethod::CottaLite => RoleMask::TRAINABLE,
        }
    }

    pub fn uses_batch_stats(self) -> bool {
        self != TtaMethod::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub method: TtaMethod,
    pub lr: f64,
    pub steps_per_batch: usize,
    /// Running-statistics momentum `m` in `θ_run ← (1−m)θ_run + m·θ_batch`.
    pub momentum: f64,
    pub ema_decay: f64,
    pub restore_prob: f64,
    pub aug_noise: f64,
    /// Ship running statistics in the update.
    pub share_running_stats: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: TtaMethod::Tent,
            lr: 0.05,
            steps_per_batch: 1,
            momentum: 0.1,
            ema_decay: 0.99,
            restore_prob: 0.01,
            aug_noise: 0.02,
            share_running_stats: true,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        let gradient_method = matches!(self.method, TtaMethod::Tent | TtaMethod::CottaLite);
        if gradient_method && !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("tta lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("tta momentum must lie in [0,1]"));
        }
        if self.method == TtaMethod::CottaLite {
            if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
                return Err(Error::config("ema decay must lie in (0,1)"));
            }
            if !(0.0..=1.0).contains(&self.restore_prob) {
                return Err(Error::config("restore probability must lie in [0,1]"));
            }
            if !(self.aug_noise >= 0.0 && self.aug_noise.is_finite()) {
                return Err(Error::config("augmentation noise must be >= 0"));
            }
        }
        Ok(())
    }

    /// Roles carried by this method's updates.
    pub fn delta_mask(&self) -> RoleMask {
        let mut m = self.method.trainable();
        if self.share_running_stats && self.method != TtaMethod::None {
            m |= RoleMask::RUNNING_STATS;
        }
        m
    }
}

/// Proximal term `μ/2·‖θ − anchor‖²` added to the adaptation loss.
#[derive(Clone, Copy, Debug)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ParamVector,
}

#[derive(Clone, Debug)]
pub struct TtaState {
    pub adapted: ParamVector,
    pub teacher: Option<ParamVector>,
    source: Arc<ParamVector>,
    pub steps: u64,
}

impl TtaState {
    pub fn new(start: ParamVector, source: Arc<ParamVector>, method: TtaMethod) -> Result<Self> {
        if !start.same_shape(&source) {
            return Err(Error::dim("tta start and source models differ in shape"));
        }
        let teacher = (method == TtaMethod::CottaLite).then(|| start.clone());
        Ok(Self {
            adapted: start,
            teacher,
            source,
            steps: 0,
        })
    }

    pub fn source(&self) -> &ParamVector {
        &self.source
    }

    /// Restart from a fresh broadcast.
    pub fn reset_to(&mut self, broadcast: &ParamVector) {
        self.adapted = broadcast.clone();
        if let Some(t) = &mut self.teacher {
            *t = broadcast.clone();
        }
    }
}

fn require_bn(spec: &ModelSpec, method: TtaMethod) -> Result<()> {
    if method != TtaMethod::None && spec.batchnorm_layers().is_empty() {
        return Err(Error::config(format!(
            "{method:?} adaptation needs at least one batch-norm layer"
        )));
    }
    Ok(())
}

/// Move running statistics toward the batch statistics recorded in `trace`.
pub fn update_running_stats(
    spec: &ModelSpec,
    params: &mut ParamVector,
    trace: &ForwardTrace,
    momentum: f64,
) {
    for layer in spec.batchnorm_layers() {
        let Some((mean, var)) = trace.bn_statistics(layer) else {
            continue;
        };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (r, b) in params.slice_mut(layer, ParamRole::BnRunningMean).iter_mut().zip(&mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in params.slice_mut(layer, ParamRole::BnRunningVar).iter_mut().zip(&var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Gradient step on the coordinates of `grad`'s mask. With a proximal term
/// the step is taken as the exact proximal map, which stays stable for any μ.
pub(crate) fn descend(
    params: &mut ParamVector,
    grad: &ParamDelta,
    lr: f64,
    prox: Option<Prox<'_>>,
) -> Result<()> {
    params.check_shape(grad.layout())?;
    let inside = params.layout().coordinate_mask(grad.mask());
    let shrink = prox.map_or(1.0, |p| 1.0 + lr * p.mu);
    let anchor = prox.map(|p| p.anchor.values());
    let mu = prox.map_or(0.0, |p| p.mu);
    let g = grad.values();
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        if !inside[i] {
            continue;
        }
        let pulled = anchor.map_or(0.0, |a| lr * mu * a[i]);
        *v = (*v - lr * g[i] + pulled) / shrink;
    }
    Ok(())
}

fn tent_like_step(
    state: &mut TtaState,
    x: &Matrix,
    config: &TtaConfig,
    spec: &ModelSpec,
    prox: Option<Prox<'_>>,
) -> Result<Vec<usize>> {
    let trace = forward(spec, &state.adapted, x, StatsMode::TrainStats)?;
    let preds = trace.predictions();
    if config.method == TtaMethod::Tent {
        let (_, adj) = MeanEntropy::default().evaluate(&trace)?;
        let (g, _) = backward(spec, &state.adapted, &trace, adj, RoleMask::BN_AFFINE)?;
        descend(&mut state.adapted, &g, config.lr, prox)?;
    }
    update_running_stats(spec, &mut state.adapted, &trace, config.momentum);
    Ok(preds)
}

fn noisy_view(x: &Matrix, sigma: f64, rng: &mut SimRng) -> Matrix {
    if sigma == 0.0 {
        return x.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("validated noise");
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

fn cotta_step(
    state: &mut TtaState,
    x: &Matrix,
    config: &TtaConfig,
    spec: &ModelSpec,
    prox: Option<Prox<'_>>,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let teacher = state
        .teacher
        .as_ref()
        .ok_or_else(|| Error::config("cotta-lite state has no teacher"))?;
    let mut soft = Matrix::zeros(x.rows(), spec.classes());
    for _ in 0..2 {
        let view = noisy_view(x, config.aug_noise, rng);
        let t = forward(spec, teacher, &view, StatsMode::TrainStats)?;
        let mut p = t.probabilities().clone();
        p.scale_in_place(0.5);
        soft.add_assign(&p);
    }
    let preds = (0..soft.rows())
        .map(|i| crate::neural::forward::argmax(soft.row(i).iter().copied()))
        .collect();

    let trace = forward(spec, &state.adapted, x, StatsMode::TrainStats)?;
    let ce = SoftTargetCe::new(soft, Default::default());
    let (_, adj): (f64, Adjoint) = ce.evaluate(&trace)?;
    let (g, _) = backward(spec, &state.adapted, &trace, adj, RoleMask::TRAINABLE)?;
    descend(&mut state.adapted, &g, config.lr, prox)?;
    update_running_stats(spec, &mut state.adapted, &trace, config.momentum);

    let d = config.ema_decay;
    let teacher = state.teacher.as_mut().expect("checked above");
    for (t, s) in teacher.values_mut().iter_mut().zip(state.adapted.values()) {
        *t = d * *t + (1.0 - d) * s;
    }
    if config.restore_prob > 0.0 {
        let src = state.source.values();
        for (i, v) in state.adapted.values_mut().iter_mut().enumerate() {
            if rng.gen::<f64>() < config.restore_prob {
                *v = src[i];
            }
        }
    }
    Ok(preds)
}

/// Adapt on one batch and return the predictions made for it. Labels are
/// never read.
pub fn tta_step(
    state: &mut TtaState,
    batch: &Batch,
    config: &TtaConfig,
    spec: &ModelSpec,
    prox: Option<Prox<'_>>,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    require_bn(spec, config.method)?;
    let x = batch.inputs();
    if x.rows() == 0 {
        return Err(Error::DegenerateBatch(0));
    }
    if !config.method.uses_batch_stats() {
        return Ok(forward(spec, &state.adapted, x, StatsMode::EvalStats)?.predictions());
    }
    if config.steps_per_batch == 0 {
        return Ok(forward(spec, &state.adapted, x, StatsMode::TrainStats)?.predictions());
    }
    let mut first = None;
    for _ in 0..config.steps_per_batch {
        let preds = match config.method {
            TtaMethod::CottaLite => cotta_step(state, x, config, spec, prox, rng)?,
            _ => tent_like_step(state, x, config, spec, prox)?,
        };
        state.steps += 1;
        first.get_or_insert(preds);
    }
    if !state.adapted.is_finite() {
        return Err(Error::Numeric("adapted parameters became non-finite".into()));
    }
    Ok(first.expect("at least one step"))
}

/// Run the client side of one round over `batches`, starting from
/// `state.adapted`, and return `θ_after − broadcast` on the method's roles.
pub fn local_round(
    state: &mut TtaState,
    batches: &[Batch],
    config: &TtaConfig,
    spec: &ModelSpec,
    broadcast: &ParamVector,
    prox_mu: Option<f64>,
    rng: &mut SimRng,
) -> Result<ParamDelta> {
    if batches.is_empty() {
        return Err(Error::InsufficientData("local round without batches".into()));
    }
    let prox = prox_mu.map(|mu| Prox {
        mu,
        anchor: broadcast,
    });
    for b in batches {
        tta_step(state, b, config, spec, prox, rng)?;
    }
    state.adapted.delta_from(broadcast, config.delta_mask())
}
