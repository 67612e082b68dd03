use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{param_axpy, ParamDelta, ParamVector};
use crate::rng::{rng_for, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    /// Similarity-weighted personalised aggregation in the spirit of pFedGraph.
    #[serde(rename = "pfedgraph-like", alias = "sim-weighted")]
    SimWeighted,
    /// Similarity weights with a self-weight floor in the spirit of FedAMP.
    #[serde(rename = "fedamp-like", alias = "amp-weighted")]
    AmpWeighted,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::SimWeighted => "pfedgraph-like",
            Strategy::AmpWeighted => "fedamp-like",
        }
    }

    pub fn personalised(self) -> bool {
        matches!(self, Strategy::SimWeighted | Strategy::AmpWeighted)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub strategy: Strategy,
    /// Server scale η.
    pub eta: f64,
    pub participation: f64,
    pub rounds: usize,
    /// Upload norm bound; `"none"` disables clipping.
    #[serde(with = "clip_bound")]
    pub clip: Option<f64>,
    pub prox_mu: f64,
    /// Similarity temperature τ.
    pub temperature: f64,
    /// Self-weight floor ρ of the fedamp-like rule.
    pub self_weight: f64,
}

mod clip_bound {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Bound(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => Repr::Bound(*c),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Bound(c) => Ok(Some(c)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("clip must be a number or \"none\", got `{w}`"))),
        }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedAvg,
            eta: 1.0,
            participation: 1.0,
            rounds: 20,
            clip: Some(1.0),
            prox_mu: 0.1,
            temperature: 0.5,
            self_weight: 0.5,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("server scale eta must be > 0"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation rate must lie in (0,1]"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip bound must be > 0"));
            }
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("fedprox mu must be >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("similarity temperature must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.self_weight) {
            return Err(Error::config("self-weight floor must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Bernoulli(rate) inclusion per client, at least one participant.
pub fn sample_clients(round: usize, clients: usize, rate: f64, seed: u64) -> Vec<usize> {
    if clients == 0 {
        return Vec::new();
    }
    let mut rng = rng_for(seed, &[tag::SAMPLING, round as u64]);
    let mut chosen: Vec<usize> = (0..clients).filter(|_| rng.gen::<f64>() < rate).collect();
    if chosen.is_empty() {
        chosen.push(rng.gen_range(0..clients));
    }
    chosen
}

/// Scale `delta` onto the L2 ball of radius `bound` if it lies outside. The
/// recomputed norm of the result never exceeds `bound`.
pub fn clip_delta(delta: &ParamDelta, bound: f64) -> ParamDelta {
    let n = delta.norm();
    if n <= bound {
        return delta.clone();
    }
    let mut k = bound / n;
    let mut out = delta.scaled(k);
    while out.norm() > bound {
        k *= 1.0 - f64::EPSILON;
        out = delta.scaled(k);
    }
    out
}

/// Result of one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregated {
    Global(ParamVector),
    Personalised(BTreeMap<usize, ParamVector>),
}

/// `n_i / Σ n_j` over the clients in `ids`.
pub fn normalised_weights(ids: &[usize], weights: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    let raw = ids
        .iter()
        .map(|i| {
            weights
                .get(i)
                .copied()
                .filter(|w| *w > 0.0 && w.is_finite())
                .ok_or_else(|| Error::Protocol(format!("client {i} has no positive weight")))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn cosine(a: &ParamDelta, b: &ParamDelta) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Row-stochastic mixing matrix of the similarity-weighted rules.
pub fn similarity_weights(deltas: &[&ParamDelta], temperature: f64, self_floor: f64) -> Vec<Vec<f64>> {
    let n = deltas.len();
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n).map(|j| cosine(deltas[i], deltas[j]) / temperature).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            (0..n)
                .map(|j| {
                    let w = (1.0 - self_floor) * e[j] / s;
                    if i == j {
                        w + self_floor
                    } else {
                        w
                    }
                })
                .collect()
        })
        .collect()
}

fn combine(global: &ParamVector, eta: f64, parts: &[(f64, &ParamDelta)]) -> Result<ParamVector> {
    let mut out = global.clone();
    for (w, d) in parts {
        out = param_axpy(eta * w, d, &out)?;
    }
    out.clamp_running_var();
    Ok(out)
}

pub fn aggregate(
    global: &ParamVector,
    deltas: &BTreeMap<usize, ParamDelta>,
    weights: &BTreeMap<usize, f64>,
    config: &ServerConfig,
) -> Result<Aggregated> {
    if deltas.is_empty() {
        return Err(Error::Protocol("aggregation without any deltas".into()));
    }
    for (id, d) in deltas {
        global
            .check_shape(d.layout())
            .map_err(|_| Error::dim(format!("delta from client {id} has the wrong shape")))?;
    }
    let ids: Vec<usize> = deltas.keys().copied().collect();
    let list: Vec<&ParamDelta> = ids.iter().map(|i| &deltas[i]).collect();
    match config.strategy {
        Strategy::FedAvg | Strategy::FedProx => {
            let w = normalised_weights(&ids, weights)?;
            let parts: Vec<(f64, &ParamDelta)> = w.into_iter().zip(list).collect();
            Ok(Aggregated::Global(combine(global, config.eta, &parts)?))
        }
        Strategy::SimWeighted | Strategy::AmpWeighted => {
            let floor = if config.strategy == Strategy::AmpWeighted {
                config.self_weight
            } else {
                0.0
            };
            let mix = similarity_weights(&list, config.temperature, floor);
            let mut out = BTreeMap::new();
            for (r, &i) in ids.iter().enumerate() {
                let parts: Vec<(f64, &ParamDelta)> =
                    mix[r].iter().copied().zip(list.iter().copied()).collect();
                out.insert(i, combine(global, config.eta, &parts)?);
            }
            Ok(Aggregated::Personalised(out))
        }
    }
}
