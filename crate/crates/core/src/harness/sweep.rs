use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::run::run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    AdversaryCount,
    PoisonRatio,
    BatchSize,
    Rounds,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::AdversaryCount => "adversary-count",
            SweepAxis::PoisonRatio => "poison-ratio",
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::Rounds => "rounds",
        }
    }

    /// Expected sign of the accuracy trend along the axis, if any.
    pub fn expected(self) -> Option<Trend> {
        match self {
            SweepAxis::AdversaryCount | SweepAxis::PoisonRatio => Some(Trend::NonIncreasing),
            SweepAxis::BatchSize => Some(Trend::NonDecreasing),
            SweepAxis::Rounds => None,
        }
    }

    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let whole = || -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::config(format!("{} needs whole values, got {value}", self.name())));
            }
            Ok(value as usize)
        };
        match self {
            SweepAxis::AdversaryCount => c.adversaries = whole()?,
            SweepAxis::PoisonRatio => c.attack.poison_ratio = value,
            SweepAxis::BatchSize => {
                // same sample budget per client: fewer rounds for larger batches
                let b = whole()?;
                if b == 0 {
                    return Err(Error::config("batch size must be positive"));
                }
                let budget = base.server.rounds * base.batch_size;
                c.batch_size = b;
                c.server.rounds = ((budget as f64 / b as f64).round() as usize).max(1);
            }
            SweepAxis::Rounds => c.server.rounds = whole()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::AdversaryCount,
            SweepAxis::PoisonRatio,
            SweepAxis::BatchSize,
            SweepAxis::Rounds,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::config(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

impl Trend {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Trend::NonIncreasing => b <= a,
            Trend::NonDecreasing => b >= a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub mean_overall: f64,
    pub final_overall: f64,
    pub source_overall: f64,
}

/// Each adjacent pair of sweep values must move in the expected direction
/// for a strict majority of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub trend: Trend,
    /// Seeds agreeing, per adjacent pair.
    pub pair_agreement: Vec<usize>,
    pub seeds: usize,
    /// Seeds whose whole sequence is monotone.
    pub monotone_seeds: usize,
    pub pass: bool,
}

pub fn trend_verdict(trend: Trend, per_seed: &[Vec<f64>]) -> TrendVerdict {
    let seeds = per_seed.len();
    let pairs = per_seed.first().map_or(0, |s| s.len().saturating_sub(1));
    let pair_agreement: Vec<usize> = (0..pairs)
        .map(|p| per_seed.iter().filter(|s| trend.holds(s[p], s[p + 1])).count())
        .collect();
    let monotone_seeds = per_seed
        .iter()
        .filter(|s| s.windows(2).all(|w| trend.holds(w[0], w[1])))
        .count();
    TrendVerdict {
        trend,
        pass: seeds > 0 && pair_agreement.iter().all(|&k| 2 * k > seeds),
        pair_agreement,
        seeds,
        monotone_seeds,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Mean over seeds of each value's mean overall accuracy.
    pub mean_by_value: Vec<f64>,
    pub verdict: Option<TrendVerdict>,
}

/// One experiment per (value, seed); seeds are `base.seed + 0..seeds`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], seeds: usize) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    if seeds == 0 {
        return Err(Error::config("sweep needs at least one seed"));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.seed + k).collect();
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seed_list.iter().map(move |&s| (v, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let mut cfg = axis.apply(base, value)?;
            cfg.seed = seed;
            let r = run(&cfg)?;
            Ok(SweepRow {
                value,
                seed,
                mean_overall: r.summary.mean_overall,
                final_overall: r.summary.final_overall,
                source_overall: r.summary.source_overall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<Vec<f64>> = seed_list
        .iter()
        .map(|&s| {
            values
                .iter()
                .map(|&v| {
                    rows.iter()
                        .find(|r| r.seed == s && r.value == v)
                        .expect("every job ran")
                        .mean_overall
                })
                .collect()
        })
        .collect();
    let mean_by_value = (0..values.len())
        .map(|i| per_seed.iter().map(|s| s[i]).sum::<f64>() / seeds as f64)
        .collect();
    Ok(SweepResult {
        config_hash: base.hash(),
        axis,
        values: values.to_vec(),
        seeds: seed_list,
        verdict: axis.expected().map(|t| trend_verdict(t, &per_seed)),
        rows,
        mean_by_value,
    })
}
