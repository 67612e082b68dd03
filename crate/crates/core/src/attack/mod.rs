//! Poisoning attackers: objectives, regularisers, the grey-box surrogate and
//! the per-round crafting loop.

mod attacker;
mod craft;
mod dia;
mod moments;
mod objectives;
mod surrogate;
mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attacker::{AttackTraceEntry, Attacker, RoundContext, WhiteBoxOracle};
pub use craft::{class_balanced_selection, craft_poisons, CraftAux, Crafted};
pub use dia::DiaLoss;
pub use moments::{
    feature_moments, gaussian_kl, loss_gaussian_kl_reg, loss_moment_reg, FeatureRegularizer,
    LayerMoments, Regularizer, VAR_FLOOR,
};
pub use objectives::{
    estimate_bn_direction, objective_trace, objective_value, AttackObjective, BalancePenalty,
    BnShift, PoisonRows,
};
pub use surrogate::{DistillReport, SurrogateState};
pub use targets::{class_balance_penalty, nhe_target, nhe_targets, ConfusionTracker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    WhiteBox,
    GreyBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelAccess {
    GroundTruth,
    PseudoLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub objective: AttackObjective,
    pub mode: AttackMode,
    pub regularizer: Regularizer,
    /// Weight of the feature regulariser.
    pub lambda: f64,
    /// Weight of the spread term in moment matching.
    pub beta: f64,
    /// Weight of the class-balance penalty.
    pub gamma: f64,
    pub epsilon: f64,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub steps: usize,
    pub poison_ratio: f64,
    /// Broadcast differences kept by the surrogate.
    pub history: usize,
    /// Feature taps used by the regulariser; all taps when unset.
    pub layers: Option<Vec<usize>>,
    pub labels: LabelAccess,
    pub pool_size: usize,
    pub distill_lr: f64,
    pub own_decay: f64,
    pub confusion_rate: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            objective: AttackObjective::Nhe,
            mode: AttackMode::GreyBox,
            regularizer: Regularizer::MomentMatch,
            lambda: 1.0,
            beta: 1.0,
            gamma: 0.1,
            epsilon: 0.03,
            step_size: None,
            steps: 10,
            poison_ratio: 0.5,
            history: 3,
            layers: None,
            labels: LabelAccess::GroundTruth,
            pool_size: 64,
            distill_lr: 0.5,
            own_decay: 0.5,
            confusion_rate: 0.1,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("attack epsilon must be positive");
        }
        if self.step().is_nan() || self.step() <= 0.0 {
            return bad("attack step size must be positive");
        }
        if !(self.poison_ratio > 0.0 && self.poison_ratio <= 1.0) {
            return bad("poison ratio must lie in (0,1]");
        }
        if self.lambda < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return bad("regulariser weights must be non-negative");
        }
        if self.history == 0 {
            return bad("surrogate history must be at least 1");
        }
        if self.pool_size < 2 {
            return bad("benign pool needs at least 2 samples");
        }
        if !(0.0..1.0).contains(&self.own_decay) || !(self.confusion_rate > 0.0 && self.confusion_rate <= 1.0) {
            return bad("surrogate decay or confusion rate out of range");
        }
        if self.distill_lr < 0.0 {
            return bad("distillation rate must be non-negative");
        }
        if self.objective == AttackObjective::RegOnly && self.regularizer == Regularizer::None {
            return bad("reg-only objective needs a regulariser");
        }
        Ok(())
    }
}
