use serde::{Deserialize, Serialize};

use crate::attack::AttackTraceEntry;
use crate::error::Result;
use crate::federation::{run_experiment, AccessMonitor, ExperimentOutcome, NoopMonitor, RoundRecord};

use super::config::ExperimentConfig;
use super::world::build_world;

/// Per-constraint pass counts over every crafted attacker round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StealthAudit {
    pub attacker_rounds: usize,
    pub crafted_rounds: usize,
    pub epsilon_ok: usize,
    pub range_ok: usize,
    pub balance_ok: usize,
    pub clip_ok: usize,
}

impl StealthAudit {
    pub fn from_logs(trace: &[AttackTraceEntry], records: &[RoundRecord], epsilon: f64) -> Self {
        let mut a = StealthAudit {
            attacker_rounds: trace.len(),
            ..Default::default()
        };
        for e in trace {
            if !e.fallback {
                a.crafted_rounds += 1;
            }
            if e.max_linf <= epsilon {
                a.epsilon_ok += 1;
            }
            if e.min_value >= 0.0 && e.max_value <= 1.0 {
                a.range_ok += 1;
            }
            let lo = e.selected_per_class.iter().min().copied().unwrap_or(0);
            let hi = e.selected_per_class.iter().max().copied().unwrap_or(0);
            if hi - lo <= 1 {
                a.balance_ok += 1;
            }
            let rec = records.iter().find(|r| r.round == e.round);
            let within = rec.is_some_and(|r| match (r.clip, r.norms_post.get(&e.attacker)) {
                (Some(c), Some(&n)) => n <= c && e.submitted_norm <= c,
                (None, Some(_)) => true,
                _ => false,
            });
            if within {
                a.clip_ok += 1;
            }
        }
        a
    }

    pub fn all_ok(&self) -> bool {
        let n = self.attacker_rounds;
        self.epsilon_ok == n && self.range_ok == n && self.balance_ok == n && self.clip_ok == n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub adversaries: usize,
    pub source_accuracy: f64,
    /// Overall accuracy of the initial broadcast before any aggregation.
    pub initial_overall: f64,
    /// Frozen source model on the same evaluation batches, averaged over
    /// rounds.
    pub source_overall: f64,
    pub mean_overall: f64,
    pub final_overall: f64,
    pub mean_benign: Option<f64>,
    pub mean_adversarial: Option<f64>,
    pub stealth: StealthAudit,
    pub max_clip_norm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub outcome: ExperimentOutcome,
    pub summary: Summary,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarise(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Summary {
    let m = &outcome.metrics;
    let init = &outcome.initial;
    Summary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rounds: m.len(),
        clients: cfg.clients,
        adversaries: cfg.adversaries,
        source_accuracy: init.source_overall,
        initial_overall: init.overall,
        source_overall: mean(m.iter().map(|r| r.source_overall)).unwrap_or(init.source_overall),
        mean_overall: mean(m.iter().map(|r| r.overall)).unwrap_or(init.overall),
        final_overall: m.last().map_or(init.overall, |r| r.overall),
        mean_benign: mean(m.iter().filter_map(|r| r.benign_mean)),
        mean_adversarial: mean(m.iter().filter_map(|r| r.adversarial_mean)),
        stealth: StealthAudit::from_logs(&outcome.attack_trace, &outcome.records, cfg.attack.epsilon),
        max_clip_norm: outcome
            .records
            .iter()
            .flat_map(|r| r.norms_post.values().copied())
            .reduce(f64::max),
    }
}

pub fn run_with_monitor(cfg: &ExperimentConfig, monitor: &dyn AccessMonitor) -> Result<RunResult> {
    let world = build_world(cfg)?;
    let outcome = run_experiment(&world, monitor)?;
    let summary = summarise(cfg, &outcome);
    Ok(RunResult {
        config: cfg.clone(),
        outcome,
        summary,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_with_monitor(cfg, &NoopMonitor)
}
