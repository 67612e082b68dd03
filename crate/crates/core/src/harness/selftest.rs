//! Quick construction-level checks runnable from the command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::attack::{
    class_balanced_selection, craft_poisons, gaussian_kl, nhe_target, AttackConfig, BnShift,
    ConfusionTracker, CraftAux, SurrogateState,
};
use crate::data::{corrupt, gen_source, partition, Batch, Corruption, Domain};
use crate::error::Result;
use crate::federation::{aggregate, clip_delta, sample_clients, Aggregated, ServerConfig};
use crate::neural::{
    entropy, forward, softmax, Matrix, ModelSpec, Objective, ParamDelta, ParamVector,
    RoleMask, StatsMode,
};
use crate::rng::rng_for;
use crate::tta::{tta_step, TtaConfig, TtaMethod, TtaState};

use super::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<bool>) -> Check {
    match f() {
        Ok(pass) => Check {
            name,
            pass,
            detail: String::new(),
        },
        Err(e) => Check {
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn one_dim() -> Result<(ModelSpec, ParamVector)> {
    let spec = ModelSpec::mlp(1, &[1], 2)?;
    let p = ParamVector::zeros(Arc::new(crate::neural::ParamLayout::for_spec(&spec)));
    Ok((spec, p))
}

fn filled(p: &ParamVector, v: f64) -> Result<ParamVector> {
    ParamVector::from_values(p.layout().clone(), vec![v; p.len()])
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        check("softmax of equal logits is uniform", || {
            let p = softmax(&Matrix::filled(2, 5, 0.3))?;
            Ok(p.as_slice().iter().all(|&v| close(v, 0.2, 1e-15)))
        }),
        check("entropy of uniform is ln K", || {
            let h = entropy(&Matrix::filled(1, 7, 1.0 / 7.0))?;
            Ok(close(h[0], 7f64.ln(), 1e-12))
        }),
        check("notched target K=10 y=3", || {
            let q = nhe_target(3, 10)?;
            Ok(q[3] == 0.0 && q.iter().enumerate().all(|(i, &v)| i == 3 || close(v, 1.0 / 9.0, 1e-15)))
        }),
        check("notched target K=2 y=0 is [0,1]", || Ok(nhe_target(0, 2)? == vec![0.0, 1.0])),
        check("two-class mapping is the swap", || {
            Ok(ConfusionTracker::new(2, 0.1)?.mapping() == [1, 0])
        }),
        check("gaussian KL N(0,1)||N(1,1) = 0.5", || {
            Ok(close(gaussian_kl(&[0.0], &[1.0], &[1.0], &[1.0]), 0.5, 1e-12))
        }),
        check("clip of a 2C delta has norm C", || {
            let (_, p) = one_dim()?;
            let d = ParamDelta::masked(p.layout().clone(), vec![1.0; p.len()], RoleMask::all());
            let c = d.norm() / 2.0;
            Ok(close(clip_delta(&d, c).norm(), c, 1e-12) && clip_delta(&d, 2.0 * c) == d)
        }),
        check("fedavg hand case [1,2] + {[2,0],[0,2]} -> [2,3]", fedavg_hand_case),
        check("rate-1 sampling includes everyone", || Ok(sample_clients(7, 10, 1.0, 3) == (0..10).collect::<Vec<_>>())),
        check("surrogate history [0],[1],[2] with k=2 gives 1", || {
            let (_, p) = one_dim()?;
            let mut s = SurrogateState::new(2, 1.0, 0.5, 0.1)?;
            for r in 0..3 {
                s.update_history(r, &filled(&p, r as f64)?)?;
            }
            Ok(s.historical_update()?.values().iter().all(|&v| close(v, 1.0, 1e-15)))
        }),
        check("constant history gives zero update", || {
            let (_, p) = one_dim()?;
            let mut s = SurrogateState::new(1, 1.0, 0.5, 0.1)?;
            s.update_history(0, &filled(&p, 0.4)?)?;
            s.update_history(1, &filled(&p, 0.4)?)?;
            Ok(s.historical_update()?.norm() == 0.0)
        }),
        check("severity 0 corruption is the identity", || {
            let set = gen_source(1, 3, 4, 5)?;
            Ok(corrupt(&set, Corruption::Noise, 0, 9)? == set)
        }),
        check("one-client partition covers the set", || {
            let set = gen_source(2, 2, 3, 10)?;
            let s = partition(&set, 1, &[Domain { kind: Corruption::Shift, severity: 1 }], 4, true, 0)?;
            Ok(s.len() == 1 && s[0].samples() == set.len())
        }),
        check("source generation is deterministic", || Ok(gen_source(5, 3, 4, 6)? == gen_source(5, 3, 4, 6)?)),
        check("no-adaptation step leaves the state unchanged", || {
            let spec = ModelSpec::mlp(3, &[4], 2)?;
            let p = ParamVector::init(&spec, &mut rng_for(1, &[]));
            let mut st = TtaState::new(p.clone(), Arc::new(p.clone()), TtaMethod::None)?;
            let b = Batch::new(Matrix::filled(4, 3, 0.5), None)?;
            let cfg = TtaConfig {
                method: TtaMethod::None,
                ..TtaConfig::default()
            };
            tta_step(&mut st, &b, &cfg, &spec, None, &mut rng_for(0, &[]))?;
            Ok(st.adapted == p)
        }),
        check("config without a seed is rejected", || {
            Ok(ExperimentConfig::from_toml_str("clients = 2", &[]).is_err())
        }),
        check("uniform prediction: max-ce is ln 4, tepa is -ln 4", || {
            let spec = ModelSpec::mlp(2, &[3], 4)?;
            let mut p = ParamVector::init(&spec, &mut rng_for(2, &[]));
            let last = spec.layers().len() - 2;
            p.slice_mut(last, crate::neural::ParamRole::Weight).fill(0.0);
            p.slice_mut(last, crate::neural::ParamRole::Bias).fill(0.0);
            let x = Matrix::filled(2, 2, 0.5);
            let t = forward(&spec, &p, &x, StatsMode::TrainStats)?;
            let rows = crate::attack::PoisonRows {
                rows: &[0, 1],
                labels: &[1, 3],
                classes: 4,
                mapping: &[1, 2, 3, 0],
                gamma: 0.0,
                bn_direction: None,
            };
            let ce = crate::attack::objective_trace(crate::attack::AttackObjective::Maxce, &rows, &spec)?.expect("trace");
            let te = crate::attack::objective_trace(crate::attack::AttackObjective::Tepa, &rows, &spec)?.expect("trace");
            Ok(close(ce.evaluate(&t)?.0, 4f64.ln(), 1e-12) && close(te.evaluate(&t)?.0, -(4f64.ln()), 1e-12))
        }),
        check("bn-shift with a zero direction is zero", || {
            let spec = ModelSpec::mlp(2, &[3], 2)?;
            let p = ParamVector::init(&spec, &mut rng_for(3, &[]));
            let x = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.7, 0.2], vec![0.4, 0.4]])?;
            let t = forward(&spec, &p, &x, StatsMode::TrainStats)?;
            Ok(BnShift::new(&spec, vec![0, 2], vec![0.0; 6])?.evaluate(&t)?.0 == 0.0)
        }),
        check("zero budget crafting returns the clean batch", || {
            let (spec, p, b, labels) = craft_fixture()?;
            let cfg = AttackConfig {
                epsilon: 0.0,
                step_size: Some(0.01),
                ..AttackConfig::default()
            };
            let pool = crate::attack::feature_moments(b.inputs(), &spec, &p, &spec.tapped_layers())?;
            let out = craft_poisons(&b, &labels, &cfg, &p, &spec, &pool, &CraftAux::default())?;
            Ok(out.batch.inputs() == b.inputs())
        }),
        check("ratio 0.5 of 100 rows poisons exactly 50", || {
            let (spec, p, b, labels) = craft_fixture()?;
            let cfg = AttackConfig {
                steps: 1,
                ..AttackConfig::default()
            };
            let pool = crate::attack::feature_moments(b.inputs(), &spec, &p, &spec.tapped_layers())?;
            let out = craft_poisons(&b, &labels, &cfg, &p, &spec, &pool, &CraftAux::default())?;
            Ok(out.batch.poisoned_count() == 50 && class_balanced_selection(&labels, 4, 50)?.len() == 50)
        }),
    ]
}

fn fedavg_hand_case() -> Result<bool> {
    // the first layer's weight and bias play the role of θ
    let (_, p) = one_dim()?;
    let mut theta = p.clone();
    theta.values_mut()[..2].copy_from_slice(&[1.0, 2.0]);
    let mut d1 = vec![0.0; p.len()];
    let mut d2 = vec![0.0; p.len()];
    d1[0] = 2.0;
    d2[1] = 2.0;
    let deltas: BTreeMap<usize, ParamDelta> = [
        (0, ParamDelta::masked(p.layout().clone(), d1, RoleMask::all())),
        (1, ParamDelta::masked(p.layout().clone(), d2, RoleMask::all())),
    ]
    .into();
    let weights: BTreeMap<usize, f64> = [(0, 1.0), (1, 1.0)].into();
    match aggregate(&theta, &deltas, &weights, &ServerConfig::default())? {
        Aggregated::Global(g) => Ok(g.values()[..2] == [2.0, 3.0]),
        Aggregated::Personalised(_) => Ok(false),
    }
}

fn craft_fixture() -> Result<(ModelSpec, ParamVector, Batch, Vec<usize>)> {
    let spec = ModelSpec::mlp(6, &[8], 4)?;
    let p = ParamVector::init(&spec, &mut rng_for(4, &[]));
    let set = gen_source(4, 4, 6, 25)?;
    let labels = set.labels().to_vec();
    Ok((spec, p, Batch::new(set.inputs().clone(), Some(labels.clone()))?, labels))
}
