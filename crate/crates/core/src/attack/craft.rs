//! Sign-gradient crafting of poison rows inside an L∞ ball.

use serde::Serialize;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::neural::{LossFn, Matrix, ModelSpec, ParamVector, RoleMask, StatsMode, SumLoss, TraceLoss};

use super::dia::DiaLoss;
use super::moments::{FeatureRegularizer, LayerMoments, Regularizer};
use super::objectives::{objective_trace, AttackObjective, PoisonRows};
use super::AttackConfig;

/// Pick `count` rows cycling over classes in label order, taking rows of a
/// class in batch order. Returned sorted.
pub fn class_balanced_selection(labels: &[usize], classes: usize, count: usize) -> Result<Vec<usize>> {
    if count > labels.len() {
        return Err(Error::config(format!("cannot select {count} of {} rows", labels.len())));
    }
    let mut queues: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::dim(format!("label {y} with {classes} classes")));
        }
        queues[y].push_back(i);
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        for q in queues.iter_mut() {
            if out.len() == count {
                break;
            }
            if let Some(i) = q.pop_front() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Clamp into `[x0−ε, x0+ε] ∩ [0,1]` so that `|v − x0| ≤ ε` also holds
/// when evaluated in floating point.
fn project(v: f64, x0: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    while v - x0 > eps {
        v = v.next_down();
    }
    while x0 - v > eps {
        v = v.next_up();
    }
    v.clamp(0.0, 1.0)
}

/// Auxiliary inputs some objectives need.
#[derive(Clone, Debug, Default)]
pub struct CraftAux<'a> {
    pub mapping: Option<&'a [usize]>,
    pub bn_direction: Option<&'a [f64]>,
    /// Inner adaptation rate for the unrolled objective.
    pub inner_lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Crafted {
    #[serde(skip)]
    pub batch: Batch,
    pub selected: Vec<usize>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub reg_before: f64,
    pub reg_after: f64,
    pub reg_floored: bool,
    pub max_linf: f64,
}

fn objective_loss(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    selected: &[usize],
    labels: &[usize],
    aux: &CraftAux<'_>,
) -> Result<Option<Box<dyn LossFn>>> {
    let classes = spec.classes();
    if cfg.objective == AttackObjective::Dia {
        let benign: Vec<usize> = (0..labels.len()).filter(|i| selected.binary_search(i).is_err()).collect();
        let benign_labels = benign.iter().map(|&i| labels[i]).collect();
        return Ok(Some(Box::new(DiaLoss {
            benign_rows: benign,
            benign_labels,
            classes,
            inner_lr: aux.inner_lr,
        })));
    }
    let identity: Vec<usize> = (0..classes).collect();
    let sel_labels: Vec<usize> = selected.iter().map(|&i| labels[i]).collect();
    let rows = PoisonRows {
        rows: selected,
        labels: &sel_labels,
        classes,
        mapping: aux.mapping.unwrap_or(&identity),
        gamma: cfg.gamma,
        bn_direction: aux.bn_direction,
    };
    Ok(objective_trace(cfg.objective, &rows, spec)?
        .map(|o| Box::new(TraceLoss::new(o, StatsMode::TrainStats)) as Box<dyn LossFn>))
}

/// Replace a class-balanced `⌊αB⌋` subset of `clean` with crafted rows
/// that stay within `ε` of the originals and inside `[0,1]`. `labels` has
/// one entry per batch row.
pub fn craft_poisons(
    clean: &Batch,
    labels: &[usize],
    cfg: &AttackConfig,
    target: &ParamVector,
    spec: &ModelSpec,
    pool: &[LayerMoments],
    aux: &CraftAux<'_>,
) -> Result<Crafted> {
    let b = clean.len();
    if labels.len() != b {
        return Err(Error::dim("one label per batch row is required"));
    }
    let count = (cfg.poison_ratio * b as f64).floor() as usize;
    if count == 0 {
        return Err(Error::config(format!(
            "poison ratio {} leaves no rows in a batch of {b}",
            cfg.poison_ratio
        )));
    }
    if cfg.epsilon < 0.0 || cfg.step() < 0.0 {
        return Err(Error::config("negative crafting budget"));
    }
    let selected = class_balanced_selection(labels, spec.classes(), count)?;
    let objective = objective_loss(cfg, spec, &selected, labels, aux)?;
    let reg = (cfg.regularizer != Regularizer::None).then(|| FeatureRegularizer {
        kind: cfg.regularizer,
        pool: pool.to_vec(),
        rows: selected.clone(),
        beta: cfg.beta,
    });
    if objective.is_none() && reg.is_none() {
        return Err(Error::config("regulariser-only crafting needs a regulariser"));
    }
    if reg.is_some() && count < 2 {
        return Err(Error::config("feature regularisers need at least two poison rows"));
    }

    let mut total = SumLoss::new();
    if let Some(o) = objective_loss(cfg, spec, &selected, labels, aux)? {
        total = total.with(cfg.objective.direction(), o);
    }
    if let Some(r) = &reg {
        total = total.with(cfg.lambda, Box::new(r.clone()));
    }

    let x0 = clean.inputs().clone();
    let measure = |x: &Matrix| -> Result<(f64, f64, bool)> {
        let o = match &objective {
            Some(o) => o.value(spec, target, x)?,
            None => 0.0,
        };
        let (r, floored) = match &reg {
            Some(r) => r.evaluate(spec, target, x)?,
            None => (0.0, false),
        };
        Ok((o, r, floored))
    };
    let (objective_before, reg_before, _) = measure(&x0)?;

    let mut x = x0.clone();
    let step = cfg.step();
    for _ in 0..cfg.steps {
        if cfg.epsilon == 0.0 {
            break;
        }
        let g = total.value_and_grads(spec, target, &x, RoleMask::empty())?.inputs;
        for &i in &selected {
            let (row0, grow) = (x0.row(i).to_vec(), g.row(i).to_vec());
            for (d, v) in x.row_mut(i).iter_mut().enumerate() {
                let s = if grow[d] > 0.0 {
                    1.0
                } else if grow[d] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *v = project(*v - step * s, row0[d], cfg.epsilon);
            }
        }
    }
    let (objective_after, reg_after, reg_floored) = measure(&x)?;
    let max_linf = x
        .as_slice()
        .iter()
        .zip(x0.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut mask = vec![false; b];
    for &i in &selected {
        mask[i] = true;
    }
    Ok(Crafted {
        batch: clean.with_poison(x, mask)?,
        selected,
        objective_before,
        objective_after,
        reg_before,
        reg_after,
        reg_floored,
        max_linf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_exact_in_floating_point() {
        for &x0 in &[0.1, 0.7, 0.33, 0.0, 1.0, 0.98] {
            for &eps in &[0.03, 0.1, 1e-3] {
                for &v in &[-1.0, 2.0, x0 + eps, x0 - eps, x0 + 0.5 * eps] {
                    let p = project(v, x0, eps);
                    assert!((p - x0).abs() <= eps, "{x0} {eps} {v} -> {p}");
                    assert!((0.0..=1.0).contains(&p));
                }
            }
        }
    }

    #[test]
    fn balanced_selection_round_robins() {
        let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let sel = class_balanced_selection(&labels, 4, 5).unwrap();
        let mut per = [0; 4];
        for &i in &sel {
            per[labels[i]] += 1;
        }
        assert_eq!(per, [2, 1, 1, 1]);
        assert!(class_balanced_selection(&labels, 4, 11).is_err());
    }

    #[test]
    fn selection_takes_rows_in_order_within_a_class() {
        let sel = class_balanced_selection(&[1, 1, 0, 0], 2, 2).unwrap();
        assert_eq!(sel, vec![0, 2]);
    }
}
