//! Poisoning objectives evaluated on a mixed batch. Each is a loss of the
//! batch inputs so that crafting can take its input gradient on the poison
//! rows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    forward, Adjoint, ForwardTrace, Matrix, MeanEntropy, ModelSpec, Objective, ParamRole,
    ParamVector, Rows, SoftTargetCe, StatsMode, SumObjective, TraceLoss,
};
use crate::rng::SimRng;
use crate::tta::{tta_step, TtaConfig, TtaMethod, TtaState};

use super::targets::{class_balance_penalty, nhe_targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackObjective {
    Nhe,
    Ble,
    BnShift,
    Maxce,
    Tepa,
    Dia,
    RegOnly,
}

impl AttackObjective {
    pub const ALL: [AttackObjective; 7] = [
        AttackObjective::Nhe,
        AttackObjective::Ble,
        AttackObjective::BnShift,
        AttackObjective::Maxce,
        AttackObjective::Tepa,
        AttackObjective::Dia,
        AttackObjective::RegOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackObjective::Nhe => "nhe",
            AttackObjective::Ble => "ble",
            AttackObjective::BnShift => "bn-shift",
            AttackObjective::Maxce => "maxce",
            AttackObjective::Tepa => "tepa",
            AttackObjective::Dia => "dia",
            AttackObjective::RegOnly => "reg-only",
        }
    }

    /// +1 when crafting minimises the objective, −1 when it ascends it.
    pub fn direction(self) -> f64 {
        match self {
            AttackObjective::Maxce | AttackObjective::Dia => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for AttackObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack objective `{s}`")))
    }
}

/// Negative entropy of the argmax class frequencies over `rows`. Piecewise
/// constant, so its gradient is zero.
#[derive(Clone, Debug)]
pub struct BalancePenalty {
    pub rows: Vec<usize>,
    pub classes: usize,
}

impl Objective for BalancePenalty {
    fn name(&self) -> String {
        "class-balance".into()
    }

    fn evaluate(&self, trace: &ForwardTrace) -> Result<(f64, Adjoint)> {
        let preds = trace.predictions();
        let sel: Vec<usize> = self.rows.iter().map(|&i| preds[i]).collect();
        Ok((class_balance_penalty(&sel, self.classes), Adjoint::for_trace(trace)))
    }
}

/// `−mean_p ⟨g(x_p), s⟩` where `g` stacks the BN-input features and their
/// squared deviation from the batch mean, for every BN layer.
#[derive(Clone, Debug)]
pub struct BnShift {
    pub rows: Vec<usize>,
    pub layers: Vec<usize>,
    pub direction: Vec<f64>,
}

impl BnShift {
    pub fn new(spec: &ModelSpec, rows: Vec<usize>, direction: Vec<f64>) -> Result<Self> {
        let layers = spec.batchnorm_layers();
        let width: usize = layers.iter().map(|&l| 2 * spec.layers()[l].input).sum();
        if layers.is_empty() {
            return Err(Error::config("bn-shift needs a batch-norm layer"));
        }
        if direction.len() != width {
            return Err(Error::dim(format!(
                "bn direction has {} entries, expected {width}",
                direction.len()
            )));
        }
        Ok(Self {
            rows,
            layers,
            direction,
        })
    }
}

impl Objective for BnShift {
    fn name(&self) -> String {
        "bn-shift".into()
    }

    fn evaluate(&self, trace: &ForwardTrace) -> Result<(f64, Adjoint)> {
        let b = trace.batch_size();
        let idx = Rows::Subset(self.rows.clone()).indices(b);
        if idx.is_empty() || idx.iter().any(|&i| i >= b) {
            return Err(Error::dim("bn-shift rows outside the batch"));
        }
        let inv_p = 1.0 / idx.len() as f64;
        let mut adj = Adjoint::for_trace(trace);
        let mut value = 0.0;
        let mut offset = 0;
        for &l in &self.layers {
            let a = trace.activation(l);
            let c = a.cols();
            let (sm, sv) = self.direction[offset..offset + 2 * c].split_at(c);
            offset += 2 * c;
            let (mu, _) = crate::neural::forward::column_moments(a);
            let mut g = Matrix::zeros(b, c);
            let mut dev_sum = vec![0.0; c];
            for &p in &idx {
                for d in 0..c {
                    let dev = a.get(p, d) - mu[d];
                    value -= inv_p * (sm[d] * a.get(p, d) + sv[d] * dev * dev);
                    dev_sum[d] += dev;
                    g.set(p, d, g.get(p, d) - inv_p * (sm[d] + 2.0 * sv[d] * dev));
                }
            }
            // the batch mean depends on every row
            for i in 0..b {
                for d in 0..c {
                    g.set(i, d, g.get(i, d) + inv_p * sv[d] * 2.0 * dev_sum[d] / b as f64);
                }
            }
            adj.add(l, g)?;
        }
        Ok((value, adj))
    }
}

/// Sign direction on BN running statistics that raises the pool loss after
/// one simulated adaptation step, normalised to unit length. Layout matches
/// [`BnShift`]: per BN layer, mean signs then variance signs.
pub fn estimate_bn_direction(
    spec: &ModelSpec,
    params: &ParamVector,
    pool: &Matrix,
    labels: &[usize],
    lr: f64,
) -> Result<Vec<f64>> {
    let cfg = TtaConfig {
        method: TtaMethod::Tent,
        lr,
        ..TtaConfig::default()
    };
    let source = std::sync::Arc::new(params.clone());
    let mut state = TtaState::new(params.clone(), source, TtaMethod::Tent)?;
    let batch = crate::data::Batch::new(pool.clone(), None)?;
    let mut unused: SimRng = crate::rng::rng_for(0, &[]);
    tta_step(&mut state, &batch, &cfg, spec, None, &mut unused)?;
    let adapted = state.adapted;

    let ce = TraceLoss::new(
        SoftTargetCe::from_labels(labels, spec.classes(), Rows::All)?,
        StatsMode::EvalStats,
    );
    let loss = |p: &ParamVector| -> Result<f64> {
        use crate::neural::LossFn;
        ce.value(spec, p, pool)
    };
    let mut dir = Vec::new();
    for l in spec.batchnorm_layers() {
        let rm = adapted.slice(l, ParamRole::BnRunningMean).to_vec();
        let rv = adapted.slice(l, ParamRole::BnRunningVar).to_vec();
        let probe = |role: ParamRole, c: usize, v: f64| -> Result<f64> {
            let mut p = adapted.clone();
            p.slice_mut(l, role)[c] = v;
            loss(&p)
        };
        let mut ms = Vec::with_capacity(rm.len());
        for c in 0..rm.len() {
            let h = 0.5 * (rv[c] + crate::neural::BN_EPS).sqrt();
            let up = probe(ParamRole::BnRunningMean, c, rm[c] + h)?;
            let down = probe(ParamRole::BnRunningMean, c, rm[c] - h)?;
            ms.push(sign(up - down));
        }
        let mut vs = Vec::with_capacity(rv.len());
        for (c, &v) in rv.iter().enumerate() {
            let up = probe(ParamRole::BnRunningVar, c, v * 1.5)?;
            let down = probe(ParamRole::BnRunningVar, c, v * 0.5)?;
            vs.push(sign(up - down));
        }
        dir.extend(ms);
        dir.extend(vs);
    }
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        dir.iter_mut().for_each(|v| *v /= n);
    }
    Ok(dir)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// What the trace objectives need to know about the poison rows.
#[derive(Clone, Copy, Debug)]
pub struct PoisonRows<'a> {
    pub rows: &'a [usize],
    /// One label per poison row.
    pub labels: &'a [usize],
    pub classes: usize,
    pub mapping: &'a [usize],
    pub gamma: f64,
    pub bn_direction: Option<&'a [f64]>,
}

/// Objective on the poison rows of a mixed batch, for a train-stats trace.
/// `None` for objectives that are not a function of a single trace.
pub fn objective_trace(
    kind: AttackObjective,
    poison: &PoisonRows<'_>,
    spec: &ModelSpec,
) -> Result<Option<SumObjective>> {
    let PoisonRows {
        rows,
        labels,
        classes,
        mapping,
        gamma,
        bn_direction,
    } = *poison;
    if rows.len() != labels.len() {
        return Err(Error::dim("one label per poison row is required"));
    }
    let sub = Rows::Subset(rows.to_vec());
    let obj = match kind {
        AttackObjective::Nhe => SumObjective::new().with(1.0, SoftTargetCe {
            targets: nhe_targets(labels, classes)?,
            rows: sub,
            label: "nhe",
        }),
        AttackObjective::Ble => {
            let mapped: Vec<usize> = labels.iter().map(|&y| mapping[y]).collect();
            let mut ce = SoftTargetCe::from_labels(&mapped, classes, sub)?;
            ce.label = "ble";
            SumObjective::new().with(1.0, ce).with(
                gamma,
                BalancePenalty {
                    rows: rows.to_vec(),
                    classes,
                },
            )
        }
        AttackObjective::Maxce => {
            let mut ce = SoftTargetCe::from_labels(labels, classes, sub)?;
            ce.label = "maxce";
            SumObjective::new().with(1.0, ce)
        }
        AttackObjective::Tepa => SumObjective::new().with(-1.0, MeanEntropy { rows: sub }),
        AttackObjective::BnShift => {
            let dir = bn_direction.ok_or_else(|| Error::config("bn-shift direction not estimated"))?;
            SumObjective::new().with(1.0, BnShift::new(spec, rows.to_vec(), dir.to_vec())?)
        }
        AttackObjective::Dia | AttackObjective::RegOnly => return Ok(None),
    };
    Ok(Some(obj))
}

/// Train-stats value of an objective trace on a batch.
pub fn objective_value(
    obj: &SumObjective,
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
) -> Result<f64> {
    let trace = forward(spec, params, inputs, StatsMode::TrainStats)?;
    Ok(obj.evaluate(&trace)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{grad_inputs, LayerSpec, LossFn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (ModelSpec, ParamVector) {
        let spec = ModelSpec::mlp(4, &[5], 3).unwrap();
        let p = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        (spec, p)
    }

    fn batch() -> Matrix {
        Matrix::from_vec(6, 4, (0..24).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for o in AttackObjective::ALL {
            assert_eq!(o.name().parse::<AttackObjective>().unwrap(), o);
        }
        assert!("pgd".parse::<AttackObjective>().is_err());
    }

    #[test]
    fn bn_shift_single_sample_parallel_case() {
        // one BN layer of width 1 fed straight from the input
        let spec = ModelSpec::new(vec![
            LayerSpec::batchnorm(1),
            LayerSpec::dense(1, 2),
            LayerSpec::softmax_head(2),
        ])
        .unwrap();
        let p = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Matrix::from_rows(&[vec![3.0], vec![1.0]]).unwrap();
        let s = vec![0.6, 0.8];
        let obj = BnShift::new(&spec, vec![0], s.clone()).unwrap();
        let trace = forward(&spec, &p, &x, StatsMode::TrainStats).unwrap();
        let (v, _) = obj.evaluate(&trace).unwrap();
        // g = [3, (3-2)^2] = [3, 1]
        assert!((v + (0.6 * 3.0 + 0.8 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bn_shift_gradient_matches_differences() {
        let (spec, p) = net();
        let x = batch();
        let dir: Vec<f64> = (0..10).map(|i| ((i as f64) * 0.37).sin()).collect();
        let loss = TraceLoss::new(BnShift::new(&spec, vec![1, 4], dir).unwrap(), StatsMode::TrainStats);
        let g = grad_inputs(&spec, &p, &x, &loss).unwrap();
        for i in 0..6 {
            for d in 0..4 {
                let mut a = x.clone();
                let mut b = x.clone();
                a.set(i, d, x.get(i, d) + 1e-5);
                b.set(i, d, x.get(i, d) - 1e-5);
                let fd = (loss.value(&spec, &p, &a).unwrap() - loss.value(&spec, &p, &b).unwrap()) / 2e-5;
                assert!((fd - g.get(i, d)).abs() < 1e-6, "{i},{d}: {fd} vs {}", g.get(i, d));
            }
        }
    }

    #[test]
    fn bn_direction_is_unit() {
        let (spec, p) = net();
        let x = batch();
        let dir = estimate_bn_direction(&spec, &p, &x, &[0, 1, 2, 0, 1, 2], 0.05).unwrap();
        assert_eq!(dir.len(), 10);
        let n: f64 = dir.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12 || n == 0.0);
    }

    #[test]
    fn ascent_objectives_flip_direction() {
        assert_eq!(AttackObjective::Maxce.direction(), -1.0);
        assert_eq!(AttackObjective::Dia.direction(), -1.0);
        assert_eq!(AttackObjective::Nhe.direction(), 1.0);
    }
}
