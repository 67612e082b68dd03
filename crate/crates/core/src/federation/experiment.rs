//! The round loop: sample, broadcast, adapt or attack, clip, aggregate,
//! evaluate.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackMode, AttackTraceEntry, Attacker, RoundContext, WhiteBoxOracle};
use crate::data::{Batch, ClientStream, Role};
use crate::error::{Error, Result};
use crate::harness::metrics::{evaluate, EvalInput, RoundMetrics};
use crate::neural::{Matrix, ModelSpec, ParamDelta, ParamVector};
use crate::rng::{rng_for, tag};
use crate::tta::{local_round, TtaConfig, TtaState};

use super::access::{AccessKind, AccessMonitor, ClientStore, Reader};
use super::aggregate::{aggregate, clip_delta, normalised_weights, sample_clients, Aggregated, ServerConfig, Strategy};

/// Everything one experiment runs on. Clients `0..adversaries` are
/// adversarial.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: ModelSpec,
    pub source: Arc<ParamVector>,
    pub streams: Vec<ClientStream>,
    pub adversaries: usize,
    pub benign_tta: TtaConfig,
    pub attacker_tta: TtaConfig,
    pub server: ServerConfig,
    pub attack: AttackConfig,
    pub batches_per_round: usize,
    /// Keep each honest client's adapted state across rounds instead of
    /// restarting from the broadcast.
    pub continual: bool,
    pub parallel: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub weights: BTreeMap<usize, f64>,
    pub norms_pre: BTreeMap<usize, f64>,
    pub norms_post: BTreeMap<usize, f64>,
    pub clip: Option<f64>,
    pub global: ParamVector,
    pub personalised: BTreeMap<usize, ParamVector>,
}

/// Hex SHA-256 of a parameter vector's little-endian bytes.
pub fn param_digest(p: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in p.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct RecordLine<'a> {
    round: usize,
    participants: &'a [usize],
    weights: &'a BTreeMap<usize, f64>,
    norms_pre: &'a BTreeMap<usize, f64>,
    norms_post: &'a BTreeMap<usize, f64>,
    clip: Option<f64>,
    global: &'a [f64],
    global_digest: String,
    personalised_digest: BTreeMap<usize, String>,
}

impl RoundRecord {
    /// JSON value for the round log, with personalised models as digests.
    pub fn log_value(&self) -> serde_json::Value {
        serde_json::to_value(RecordLine {
            round: self.round,
            participants: &self.participants,
            weights: &self.weights,
            norms_pre: &self.norms_pre,
            norms_post: &self.norms_post,
            clip: self.clip,
            global: self.global.values(),
            global_digest: param_digest(&self.global),
            personalised_digest: self.personalised.iter().map(|(k, v)| (*k, param_digest(v))).collect(),
        })
        .expect("plain data")
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub metrics: Vec<RoundMetrics>,
    /// Round-0 evaluation batches under the initial broadcast, before any
    /// aggregation.
    pub initial: RoundMetrics,
    pub attack_trace: Vec<AttackTraceEntry>,
}

/// Which batches a client uses when.
struct StreamPlan {
    pool: Vec<usize>,
    adapt: Vec<usize>,
    eval: Vec<usize>,
}

impl StreamPlan {
    fn new(stream: &ClientStream, pool_rows: usize) -> Result<Self> {
        let mut pool = Vec::new();
        let mut rows = 0;
        let mut idx = 0;
        while rows < pool_rows && idx < stream.batches.len() {
            rows += stream.batches[idx].len();
            pool.push(idx);
            idx += 1;
        }
        let rest: Vec<usize> = (idx..stream.batches.len()).collect();
        let adapt: Vec<usize> = rest.iter().copied().step_by(2).collect();
        let eval: Vec<usize> = rest.iter().copied().skip(1).step_by(2).collect();
        if adapt.is_empty() || eval.is_empty() {
            return Err(Error::InsufficientData(format!(
                "client {} has {} batches; needs pool, adaptation and evaluation batches",
                stream.id,
                stream.batches.len()
            )));
        }
        Ok(Self { pool, adapt, eval })
    }

    /// Position `pos` in `list` replayed epoch after epoch, reshuffled after
    /// the first pass.
    fn cycle(list: &[usize], pos: usize, seed: u64, client: usize, salt: u64) -> usize {
        let epoch = pos / list.len();
        let at = pos % list.len();
        if epoch == 0 {
            return list[at];
        }
        let mut order = list.to_vec();
        order.shuffle(&mut rng_for(seed, &[tag::REPLAY, client as u64, salt, epoch as u64]));
        order[at]
    }

    fn adapt_batches(&self, round: usize, per_round: usize, seed: u64, client: usize) -> Vec<usize> {
        (0..per_round)
            .map(|k| Self::cycle(&self.adapt, round * per_round + k, seed, client, 0))
            .collect()
    }

    fn eval_batch(&self, round: usize, seed: u64, client: usize) -> usize {
        Self::cycle(&self.eval, round, seed, client, 1)
    }
}

struct CleanOracle<'a> {
    models: BTreeMap<usize, ParamVector>,
    honest: Vec<usize>,
    store: &'a ClientStore<'a>,
    round: usize,
}

impl WhiteBoxOracle for CleanOracle<'_> {
    fn clean_post_aggregation(&self, attacker: usize) -> Result<ParamVector> {
        for &j in &self.honest {
            self.store.record(self.round, Reader::Attacker(attacker), j, AccessKind::Delta);
        }
        self.models
            .get(&attacker)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("no clean aggregate for attacker {attacker}")))
    }
}

fn check_world(w: &World) -> Result<()> {
    w.server.validate()?;
    w.benign_tta.validate()?;
    w.attacker_tta.validate()?;
    if w.adversaries > 0 {
        w.attack.validate()?;
    }
    if w.streams.is_empty() {
        return Err(Error::config("world has no clients"));
    }
    if w.adversaries > w.streams.len() {
        return Err(Error::config(format!(
            "{} adversaries among {} clients",
            w.adversaries,
            w.streams.len()
        )));
    }
    if w.batches_per_round == 0 {
        return Err(Error::config("batches per round must be at least 1"));
    }
    if w.source.layout().as_ref() != &crate::neural::ParamLayout::for_spec(&w.spec) {
        return Err(Error::dim("source parameters do not match the model spec"));
    }
    for (i, s) in w.streams.iter().enumerate() {
        if s.id != i {
            return Err(Error::config("stream ids must be 0..N in order"));
        }
        let want = if i < w.adversaries { Role::Adversarial } else { Role::Benign };
        if s.role != want {
            return Err(Error::config(format!("client {i} role does not match the adversary count")));
        }
        if s.batches.iter().any(|b| b.inputs().cols() != w.spec.input_width()) {
            return Err(Error::dim(format!("client {i} batches do not match the model input width")));
        }
    }
    Ok(())
}

fn ordered_map<T: Send>(ids: &[usize], parallel: bool, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<BTreeMap<usize, T>> {
    let out: Vec<Result<(usize, T)>> = if parallel {
        ids.par_iter().map(|&i| f(i).map(|v| (i, v))).collect()
    } else {
        ids.iter().map(|&i| f(i).map(|v| (i, v))).collect()
    };
    out.into_iter().collect()
}

pub fn run_experiment(world: &World, monitor: &dyn AccessMonitor) -> Result<ExperimentOutcome> {
    check_world(world)?;
    let n = world.streams.len();
    let m = world.adversaries;
    let seed = world.seed;
    let store = ClientStore::new(&world.streams, monitor);
    let plans = world
        .streams
        .iter()
        .map(|s| StreamPlan::new(s, world.attack.pool_size))
        .collect::<Result<Vec<_>>>()?;

    let mut attackers: Vec<Mutex<Attacker>> = Vec::with_capacity(m);
    for (a, plan) in plans.iter().enumerate().take(m) {
        let mut xs: Vec<Matrix> = Vec::new();
        let mut ys = Vec::new();
        for &b in &plan.pool {
            let batch = store.labelled(0, Reader::Attacker(a), a, b)?;
            ys.extend_from_slice(batch.labels().unwrap_or_default());
            xs.push(batch.inputs().clone());
        }
        let refs: Vec<&Matrix> = xs.iter().collect();
        let pool = Matrix::vstack(&refs)?;
        attackers.push(Mutex::new(Attacker::new(a, world.attack.clone(), &world.spec, pool, ys, world.server.eta)?));
    }

    let mut continual_states: Vec<Option<TtaState>> = vec![None; n];
    let mut global = (*world.source).clone();
    let mut personal: BTreeMap<usize, ParamVector> = BTreeMap::new();
    let mut records = Vec::with_capacity(world.server.rounds);
    let mut metrics = Vec::with_capacity(world.server.rounds);
    let mut trace = Vec::new();
    let fedprox_mu = (world.server.strategy == Strategy::FedProx).then_some(world.server.prox_mu);
    let sample_weight = |i: usize| -> f64 {
        world.streams[i].batches.first().map_or(1.0, |b| b.len() as f64) * world.batches_per_round as f64
    };

    let eval_round = |round: usize, models: &dyn Fn(usize) -> ParamVector, participated: &[usize]| -> Result<RoundMetrics> {
        let mut batches = Vec::with_capacity(n);
        let mut owned = Vec::with_capacity(n);
        for (i, plan) in plans.iter().enumerate() {
            batches.push(store.labelled(round, Reader::Harness, i, plan.eval_batch(round, seed, i))?);
            owned.push(models(i));
        }
        let inputs: Vec<EvalInput<'_>> = (0..n)
            .map(|i| EvalInput {
                client: i,
                role: world.streams[i].role,
                participated: participated.contains(&i),
                model: &owned[i],
                batch: &batches[i],
            })
            .collect();
        evaluate(round, &world.spec, &world.source, &inputs, &world.benign_tta, seed)
    };

    let initial = eval_round(0, &|_| (*world.source).clone(), &[])?;

    for round in 0..world.server.rounds {
        let participants = sample_clients(round, n, world.server.participation, seed);
        let start = |i: usize| personal.get(&i).unwrap_or(&global).clone();
        let honest: Vec<usize> = participants.iter().copied().filter(|&i| i >= m).collect();
        let adversarial: Vec<usize> = participants.iter().copied().filter(|&i| i < m).collect();
        let weight_in = participants.iter().map(|&i| (i, sample_weight(i))).collect::<BTreeMap<_, _>>();
        let weights: BTreeMap<usize, f64> = participants
            .iter()
            .copied()
            .zip(normalised_weights(&participants, &weight_in)?)
            .collect();

        let adapt_batches = |reader: Reader, i: usize, labelled: bool| -> Result<Vec<Batch>> {
            plans[i]
                .adapt_batches(round, world.batches_per_round, seed, i)
                .into_iter()
                .map(|b| {
                    if labelled {
                        store.labelled(round, reader, i, b)
                    } else {
                        store.inputs(round, reader, i, b)
                    }
                })
                .collect()
        };

        let states_in: Vec<Mutex<Option<TtaState>>> = continual_states.drain(..).map(Mutex::new).collect();
        let honest_deltas = ordered_map(&honest, world.parallel, |i| {
            let broadcast = start(i);
            let batches = adapt_batches(Reader::Client(i), i, false)?;
            let mut slot = states_in[i].lock().expect("state lock");
            let mut state = match slot.take() {
                Some(s) if world.continual => s,
                _ => TtaState::new(broadcast.clone(), world.source.clone(), world.benign_tta.method)?,
            };
            let mut rng = rng_for(seed, &[tag::TTA, i as u64, round as u64]);
            let d = local_round(&mut state, &batches, &world.benign_tta, &world.spec, &broadcast, fedprox_mu, &mut rng)?;
            if world.continual {
                *slot = Some(state);
            }
            Ok(d)
        })?;
        continual_states = states_in.into_iter().map(|s| s.into_inner().expect("state lock")).collect();
        for &i in &honest {
            store.record(round, Reader::Server, i, AccessKind::Delta);
        }

        let oracle = if world.attack.mode == AttackMode::WhiteBox && !adversarial.is_empty() {
            let clean = ordered_map(&adversarial, world.parallel, |a| {
                let broadcast = start(a);
                let batches = adapt_batches(Reader::Attacker(a), a, false)?;
                let mut state = TtaState::new(broadcast.clone(), world.source.clone(), world.attacker_tta.method)?;
                let mut rng = rng_for(seed, &[tag::ATTACK, a as u64, round as u64]);
                local_round(&mut state, &batches, &world.attacker_tta, &world.spec, &broadcast, fedprox_mu, &mut rng)
            })?;
            let mut all: BTreeMap<usize, ParamDelta> = honest_deltas.clone();
            all.extend(clean);
            let clipped = clip_all(&all, world.server.clip);
            let models = match aggregate(&global, &clipped, &weights, &world.server)? {
                Aggregated::Global(g) => adversarial.iter().map(|&a| (a, g.clone())).collect(),
                Aggregated::Personalised(p) => p.into_iter().filter(|(k, _)| *k < m).collect(),
            };
            Some(CleanOracle {
                models,
                honest: honest.clone(),
                store: &store,
                round,
            })
        } else {
            None
        };

        let attack_out = ordered_map(&adversarial, world.parallel, |a| {
            let broadcast = start(a);
            let batches = adapt_batches(Reader::Attacker(a), a, true)?;
            let ctx = RoundContext {
                round,
                broadcast: &broadcast,
                batches: &batches,
                spec: &world.spec,
                tta: &world.attacker_tta,
                source: &world.source,
                eta: world.server.eta,
                weight: weights[&a],
                clip: world.server.clip,
                prox_mu: fedprox_mu,
                oracle: oracle.as_ref().map(|o| o as &dyn WhiteBoxOracle),
            };
            let mut rng = rng_for(seed, &[tag::ATTACK, a as u64, round as u64]);
            attackers[a].lock().expect("attacker lock").attacker_round(&ctx, &mut rng)
        })?;

        let mut deltas = honest_deltas;
        for (a, (d, entry)) in attack_out {
            deltas.insert(a, d);
            trace.push(entry);
        }
        let norms_pre = deltas.iter().map(|(k, d)| (*k, d.norm())).collect();
        let clipped = clip_all(&deltas, world.server.clip);
        let norms_post = clipped.iter().map(|(k, d)| (*k, d.norm())).collect();

        let base = global.clone();
        match aggregate(&base, &clipped, &weights, &world.server)? {
            Aggregated::Global(g) => global = g,
            Aggregated::Personalised(p) => {
                let plain = ServerConfig {
                    strategy: Strategy::FedAvg,
                    ..world.server.clone()
                };
                if let Aggregated::Global(g) = aggregate(&base, &clipped, &weights, &plain)? {
                    global = g;
                }
                personal.extend(p);
            }
        }
        if !global.is_finite() {
            return Err(Error::Numeric(format!("global model became non-finite in round {round}")));
        }
        records.push(RoundRecord {
            round,
            participants: participants.clone(),
            weights,
            norms_pre,
            norms_post,
            clip: world.server.clip,
            global: global.clone(),
            personalised: personal.clone(),
        });
        let model_of = |i: usize| personal.get(&i).unwrap_or(&global).clone();
        metrics.push(eval_round(round, &model_of, &participants)?);
    }
    Ok(ExperimentOutcome {
        records,
        metrics,
        initial,
        attack_trace: trace,
    })
}

fn clip_all(deltas: &BTreeMap<usize, ParamDelta>, clip: Option<f64>) -> BTreeMap<usize, ParamDelta> {
    deltas
        .iter()
        .map(|(k, d)| (*k, clip.map_or_else(|| d.clone(), |c| clip_delta(d, c))))
        .collect()
}
