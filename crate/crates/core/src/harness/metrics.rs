use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Role};
use crate::error::{Error, Result};
use crate::neural::losses::row_entropy;
use crate::neural::{forward, ModelSpec, ParamVector, StatsMode};
use crate::rng::{rng_for, tag};
use crate::tta::{tta_step, TtaConfig, TtaState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub role: Role,
    pub participated: bool,
    pub samples: usize,
    pub correct: usize,
    pub source_correct: usize,
    pub accuracy: f64,
    pub source_accuracy: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientMetrics>,
    pub benign_mean: Option<f64>,
    /// Accuracy on the adversarial clients' own clean evaluation batches.
    pub adversarial_mean: Option<f64>,
    /// Sample-weighted over every client's evaluation batch.
    pub overall: f64,
    pub source_overall: f64,
}

fn pooled(clients: &[&ClientMetrics], source: bool) -> Option<f64> {
    let n: usize = clients.iter().map(|c| c.samples).sum();
    (n > 0).then(|| {
        let k: usize = clients
            .iter()
            .map(|c| if source { c.source_correct } else { c.correct })
            .sum();
        k as f64 / n as f64
    })
}

impl RoundMetrics {
    pub fn from_clients(round: usize, clients: Vec<ClientMetrics>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InsufficientData("no clients to evaluate".into()));
        }
        let all: Vec<&ClientMetrics> = clients.iter().collect();
        let group = |r: Role| -> Vec<&ClientMetrics> { clients.iter().filter(|c| c.role == r).collect() };
        Ok(Self {
            round,
            benign_mean: pooled(&group(Role::Benign), false),
            adversarial_mean: pooled(&group(Role::Adversarial), false),
            overall: pooled(&all, false).expect("nonempty"),
            source_overall: pooled(&all, true).expect("nonempty"),
            clients,
        })
    }
}

/// One client's model and labelled evaluation batch.
pub struct EvalInput<'a> {
    pub client: usize,
    pub role: Role,
    pub participated: bool,
    pub model: &'a ParamVector,
    pub batch: &'a Batch,
}

/// Accuracy of each client's model on its evaluation batch, predicting the
/// way its adaptation method would, next to the frozen source model.
pub fn evaluate(
    round: usize,
    spec: &ModelSpec,
    source: &Arc<ParamVector>,
    inputs: &[EvalInput<'_>],
    tta: &TtaConfig,
    seed: u64,
) -> Result<RoundMetrics> {
    let clients = inputs
        .par_iter()
        .map(|e| {
            let labels = e
                .batch
                .labels()
                .ok_or_else(|| Error::InsufficientData(format!("client {} eval batch has no labels", e.client)))?;
            if labels.is_empty() {
                return Err(Error::InsufficientData(format!("client {} eval batch is empty", e.client)));
            }
            let mut state = TtaState::new(e.model.clone(), source.clone(), tta.method)?;
            let mut rng = rng_for(seed, &[tag::EVAL, e.client as u64, round as u64]);
            let preds = tta_step(&mut state, &e.batch.unlabeled(), tta, spec, None, &mut rng)?;
            let mode = if tta.method.uses_batch_stats() {
                StatsMode::TrainStats
            } else {
                StatsMode::EvalStats
            };
            let probs = forward(spec, e.model, e.batch.inputs(), mode)?;
            let entropy = probs.probabilities().row_iter().map(row_entropy).sum::<f64>() / labels.len() as f64;
            let src = forward(spec, source, e.batch.inputs(), StatsMode::EvalStats)?.predictions();
            let hits = |p: &[usize]| p.iter().zip(labels).filter(|(a, b)| a == b).count();
            let (correct, source_correct) = (hits(&preds), hits(&src));
            let n = labels.len();
            Ok(ClientMetrics {
                client: e.client,
                role: e.role,
                participated: e.participated,
                samples: n,
                correct,
                source_correct,
                accuracy: correct as f64 / n as f64,
                source_accuracy: source_correct as f64 / n as f64,
                entropy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RoundMetrics::from_clients(round, clients)
}
