use std::sync::Arc;

use serde::Serialize;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::federation::clip_delta;
use crate::neural::{forward, Matrix, ModelSpec, ParamDelta, ParamVector, StatsMode};
use crate::rng::SimRng;
use crate::tta::{local_round, TtaConfig, TtaState};

use super::craft::{craft_poisons, CraftAux, Crafted};
use super::moments::feature_moments;
use super::objectives::{estimate_bn_direction, AttackObjective};
use super::surrogate::{DistillReport, SurrogateState};
use super::targets::ConfusionTracker;
use super::{AttackConfig, AttackMode, LabelAccess};

/// Live-protocol access granted to white-box attackers. Implementations log
/// every read.
pub trait WhiteBoxOracle: Sync {
    /// The next global model as it would be if every participant, this
    /// attacker included, adapted honestly this round.
    fn clean_post_aggregation(&self, attacker: usize) -> Result<ParamVector>;
}

/// Everything an attacker may see in one round.
pub struct RoundContext<'a> {
    pub round: usize,
    pub broadcast: &'a ParamVector,
    /// The attacker's own clean adaptation batches, labelled.
    pub batches: &'a [Batch],
    pub spec: &'a ModelSpec,
    pub tta: &'a TtaConfig,
    pub source: &'a Arc<ParamVector>,
    pub eta: f64,
    pub weight: f64,
    pub clip: Option<f64>,
    pub prox_mu: Option<f64>,
    pub oracle: Option<&'a dyn WhiteBoxOracle>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackTraceEntry {
    pub round: usize,
    pub attacker: usize,
    pub mode: AttackMode,
    pub objective: AttackObjective,
    /// Honest behaviour because no crafting target was available.
    pub fallback: bool,
    pub poisoned: usize,
    pub batch_size: usize,
    pub selected_per_class: Vec<usize>,
    pub max_linf: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub reg_before: f64,
    pub reg_after: f64,
    pub reg_floored: bool,
    pub clean_delta_norm: f64,
    pub delta_norm: f64,
    /// Distance between the poisoned and the clean local update.
    pub shift_norm: f64,
    pub submitted_norm: f64,
    pub distill: Option<DistillReport>,
}

#[derive(Clone, Debug)]
pub struct Attacker {
    pub id: usize,
    config: AttackConfig,
    surrogate: SurrogateState,
    tracker: ConfusionTracker,
    pool: Matrix,
    pool_labels: Vec<usize>,
    bn_direction: Option<Vec<f64>>,
}

impl Attacker {
    pub fn new(
        id: usize,
        config: AttackConfig,
        spec: &ModelSpec,
        pool: Matrix,
        pool_labels: Vec<usize>,
        eta: f64,
    ) -> Result<Self> {
        config.validate()?;
        if pool.rows() < 2 || pool_labels.len() != pool.rows() {
            return Err(Error::AttackerData(format!(
                "attacker {id} pool has {} rows and {} labels",
                pool.rows(),
                pool_labels.len()
            )));
        }
        let surrogate = SurrogateState::new(config.history, eta, config.own_decay, config.distill_lr)?;
        let tracker = ConfusionTracker::new(spec.classes(), config.confusion_rate)?;
        Ok(Self {
            id,
            config,
            surrogate,
            tracker,
            pool,
            pool_labels,
            bn_direction: None,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn surrogate(&self) -> &SurrogateState {
        &self.surrogate
    }

    pub fn tracker(&self) -> &ConfusionTracker {
        &self.tracker
    }

    fn layers(&self, spec: &ModelSpec) -> Vec<usize> {
        self.config.layers.clone().unwrap_or_else(|| spec.tapped_layers())
    }

    fn labels_for(&self, batch: &Batch, spec: &ModelSpec, model: &ParamVector) -> Result<Vec<usize>> {
        match self.config.labels {
            LabelAccess::GroundTruth => batch.labels().map(<[usize]>::to_vec).ok_or_else(|| {
                Error::AttackerData(format!("attacker {} has no labels for its batch", self.id))
            }),
            LabelAccess::PseudoLabel => {
                Ok(forward(spec, model, batch.inputs(), StatsMode::TrainStats)?.predictions())
            }
        }
    }

    fn adapt(&self, ctx: &RoundContext<'_>, batches: &[Batch], rng: &mut SimRng) -> Result<ParamDelta> {
        let mut state = TtaState::new(ctx.broadcast.clone(), ctx.source.clone(), ctx.tta.method)?;
        local_round(&mut state, batches, ctx.tta, ctx.spec, ctx.broadcast, ctx.prox_mu, rng)
    }

    /// Craft this round's batches, adapt on them and return the delta to
    /// submit.
    pub fn attacker_round(&mut self, ctx: &RoundContext<'_>, rng: &mut SimRng) -> Result<(ParamDelta, AttackTraceEntry)> {
        if ctx.batches.is_empty() {
            return Err(Error::AttackerData(format!("attacker {} has no batches", self.id)));
        }
        let distill = match self.surrogate.distill_posterior(ctx.round, ctx.broadcast, &self.pool, ctx.spec) {
            Ok(r) => Some(r),
            Err(Error::SurrogateNotReady(_)) => None,
            Err(e) => return Err(e),
        };
        self.surrogate.update_history(ctx.round, ctx.broadcast)?;

        let clean = self.adapt(ctx, ctx.batches, rng)?;
        let target = match self.config.mode {
            AttackMode::WhiteBox => {
                let oracle = ctx
                    .oracle
                    .ok_or_else(|| Error::Protocol("white-box attacker without oracle access".into()))?;
                Some(oracle.clean_post_aggregation(self.id)?)
            }
            AttackMode::GreyBox if self.surrogate.is_ready() => {
                Some(self.surrogate.predict_post_agg(&clean, ctx.weight)?)
            }
            AttackMode::GreyBox => None,
        };

        let Some(target) = target else {
            let submitted = ctx.clip.map_or_else(|| clean.clone(), |c| clip_delta(&clean, c));
            self.surrogate.record_submission(ctx.round, &submitted, ctx.weight)?;
            let b = &ctx.batches[0];
            let (lo, hi) = value_range(b.inputs());
            let entry = AttackTraceEntry {
                round: ctx.round,
                attacker: self.id,
                mode: self.config.mode,
                objective: self.config.objective,
                fallback: true,
                poisoned: 0,
                batch_size: b.len(),
                selected_per_class: vec![0; ctx.spec.classes()],
                max_linf: 0.0,
                min_value: lo,
                max_value: hi,
                objective_before: f64::NAN,
                objective_after: f64::NAN,
                reg_before: f64::NAN,
                reg_after: f64::NAN,
                reg_floored: false,
                clean_delta_norm: clean.norm(),
                delta_norm: clean.norm(),
                shift_norm: 0.0,
                submitted_norm: submitted.norm(),
                distill,
            };
            return Ok((submitted, entry));
        };

        let layers = self.layers(ctx.spec);
        let pool_moments = feature_moments(&self.pool, ctx.spec, &target, &layers)?;
        if self.config.objective == AttackObjective::BnShift && self.bn_direction.is_none() {
            self.bn_direction = Some(estimate_bn_direction(
                ctx.spec,
                &target,
                &self.pool,
                &self.pool_labels,
                ctx.tta.lr,
            )?);
        }

        let mut crafted: Vec<Crafted> = Vec::with_capacity(ctx.batches.len());
        for batch in ctx.batches {
            let labels = self.labels_for(batch, ctx.spec, ctx.broadcast)?;
            if self.config.objective == AttackObjective::Ble {
                let preds = forward(ctx.spec, &target, batch.inputs(), StatsMode::TrainStats)?.predictions();
                self.tracker.update(&preds, &labels)?;
            }
            let aux = CraftAux {
                mapping: Some(self.tracker.mapping()),
                bn_direction: self.bn_direction.as_deref(),
                inner_lr: ctx.tta.lr,
            };
            crafted.push(craft_poisons(batch, &labels, &self.config, &target, ctx.spec, &pool_moments, &aux)?);
        }

        let poisoned: Vec<Batch> = crafted.iter().map(|c| c.batch.clone()).collect();
        let delta = self.adapt(ctx, &poisoned, rng)?;
        let submitted = ctx.clip.map_or_else(|| delta.clone(), |c| clip_delta(&delta, c));
        self.surrogate.record_submission(ctx.round, &submitted, ctx.weight)?;

        let first = &crafted[0];
        let labels = self.labels_for(&ctx.batches[0], ctx.spec, ctx.broadcast)?;
        let mut per_class = vec![0; ctx.spec.classes()];
        for &i in &first.selected {
            per_class[labels[i]] += 1;
        }
        let (lo, hi) = crafted
            .iter()
            .map(|c| value_range(c.batch.inputs()))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)));
        let n = crafted.len() as f64;
        let mean = |f: fn(&Crafted) -> f64| crafted.iter().map(f).sum::<f64>() / n;
        let entry = AttackTraceEntry {
            round: ctx.round,
            attacker: self.id,
            mode: self.config.mode,
            objective: self.config.objective,
            fallback: false,
            poisoned: crafted.iter().map(|c| c.selected.len()).sum(),
            batch_size: ctx.batches.iter().map(Batch::len).sum(),
            selected_per_class: per_class,
            max_linf: crafted.iter().map(|c| c.max_linf).fold(0.0, f64::max),
            min_value: lo,
            max_value: hi,
            objective_before: mean(|c| c.objective_before),
            objective_after: mean(|c| c.objective_after),
            reg_before: mean(|c| c.reg_before),
            reg_after: mean(|c| c.reg_after),
            reg_floored: crafted.iter().any(|c| c.reg_floored),
            clean_delta_norm: clean.norm(),
            delta_norm: delta.norm(),
            shift_norm: delta.add_scaled(-1.0, &clean)?.norm(),
            submitted_norm: submitted.norm(),
            distill,
        };
        Ok((submitted, entry))
    }
}

fn value_range(x: &Matrix) -> (f64, f64) {
    x.as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}
