//! Central finite-difference checks of every registered loss.

use serde::Serialize;

use crate::attack::{
    estimate_bn_direction, nhe_targets, objective_trace, AttackObjective, BnShift, DiaLoss,
    FeatureRegularizer, LayerMoments, PoisonRows, Regularizer,
};
use crate::error::Result;
use crate::neural::{
    forward, LossFn, Matrix, MeanEntropy, ModelSpec, ParamVector, RoleMask, Rows, SoftTargetCe,
    StatsMode, TraceLoss,
};
use crate::rng::rng_for;

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub loss: String,
    pub wrt: &'static str,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic and numerical gradients of `loss` at `(params, x)`.
pub fn check_loss(
    name: &str,
    loss: &dyn LossFn,
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Matrix,
) -> Result<Vec<GradcheckResult>> {
    let g = loss.value_and_grads(spec, params, x, RoleMask::all())?;
    let mut worst_x: f64 = 0.0;
    for i in 0..x.as_slice().len() {
        let mut a = x.clone();
        let mut b = x.clone();
        a.as_mut_slice()[i] += STEP;
        b.as_mut_slice()[i] -= STEP;
        let fd = (loss.value(spec, params, &a)? - loss.value(spec, params, &b)?) / (2.0 * STEP);
        worst_x = worst_x.max(rel(g.inputs.as_slice()[i], fd));
    }
    let mut worst_p: f64 = 0.0;
    for i in 0..params.len() {
        let mut a = params.clone();
        let mut b = params.clone();
        a.values_mut()[i] += STEP;
        b.values_mut()[i] -= STEP;
        let fd = (loss.value(spec, &a, x)? - loss.value(spec, &b, x)?) / (2.0 * STEP);
        worst_p = worst_p.max(rel(g.params.values()[i], fd));
    }
    Ok(vec![
        GradcheckResult {
            loss: name.into(),
            wrt: "inputs",
            coordinates: x.as_slice().len(),
            max_rel_err: worst_x,
            pass: worst_x < TOLERANCE,
        },
        GradcheckResult {
            loss: name.into(),
            wrt: "params",
            coordinates: params.len(),
            max_rel_err: worst_p,
            pass: worst_p < TOLERANCE,
        },
    ])
}

/// Smallest distance of any pre-activation from the ReLU kink, over both
/// statistics modes.
fn relu_margin(spec: &ModelSpec, params: &ParamVector, x: &Matrix) -> Result<f64> {
    let mut m = f64::INFINITY;
    for mode in [StatsMode::TrainStats, StatsMode::EvalStats] {
        let t = forward(spec, params, x, mode)?;
        for (l, layer) in spec.layers().iter().enumerate() {
            if layer.kind == crate::neural::LayerKind::Relu {
                m = t.activation(l).as_slice().iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
    }
    Ok(m)
}

/// A small net, batch and labels with every ReLU input at least 1e-2 away
/// from zero.
pub fn fixture() -> Result<(ModelSpec, ParamVector, Matrix, Vec<usize>)> {
    use rand::Rng;
    let spec = ModelSpec::mlp(4, &[6], 3)?;
    for attempt in 0..1000u64 {
        let mut rng = rng_for(attempt, &[0x6763]);
        let mut params = ParamVector::init(&spec, &mut rng);
        for l in spec.batchnorm_layers() {
            for v in params.slice_mut(l, crate::neural::ParamRole::BnRunningMean) {
                *v = rng.gen_range(-0.2..0.2);
            }
            for v in params.slice_mut(l, crate::neural::ParamRole::BnRunningVar) {
                *v = rng.gen_range(0.5..1.5);
            }
        }
        let x = Matrix::from_vec(8, 4, (0..32).map(|_| rng.gen_range(0.1..0.9)).collect())?;
        if relu_margin(&spec, &params, &x)? >= 1e-2 {
            return Ok((spec, params, x, vec![0, 1, 2, 0, 1, 2, 0, 1]));
        }
    }
    Err(crate::Error::Numeric("no gradcheck fixture clear of ReLU kinks".into()))
}

/// Every registered loss against finite differences.
pub fn run_gradcheck() -> Result<Vec<GradcheckResult>> {
    let (spec, params, x, labels) = fixture()?;
    let k = spec.classes();
    let poison = vec![1, 2, 5, 6];
    let poison_labels: Vec<usize> = poison.iter().map(|&i| labels[i]).collect();
    let benign: Vec<usize> = (0..x.rows()).filter(|i| !poison.contains(i)).collect();
    let mapping: Vec<usize> = (0..k).map(|y| (y + 1) % k).collect();
    let direction = estimate_bn_direction(&spec, &params, &x, &labels, 0.05)?;
    let pool: Vec<LayerMoments> = {
        let mut shifted = x.clone();
        for v in shifted.as_mut_slice() {
            *v = 0.8 * *v + 0.05;
        }
        crate::attack::feature_moments(&shifted, &spec, &params, &spec.tapped_layers())?
    };
    let rows = PoisonRows {
        rows: &poison,
        labels: &poison_labels,
        classes: k,
        mapping: &mapping,
        gamma: 0.3,
        bn_direction: Some(&direction),
    };
    let trace_obj = |o: AttackObjective| -> Result<Box<dyn LossFn>> {
        let obj = objective_trace(o, &rows, &spec)?.expect("trace objective");
        Ok(Box::new(TraceLoss::new(obj, StatsMode::TrainStats)))
    };

    let mut losses: Vec<(String, Box<dyn LossFn>)> = vec![
        (
            "entropy".into(),
            Box::new(TraceLoss::new(MeanEntropy::default(), StatsMode::TrainStats)),
        ),
        (
            "entropy-eval".into(),
            Box::new(TraceLoss::new(MeanEntropy::default(), StatsMode::EvalStats)),
        ),
        (
            "ce".into(),
            Box::new(TraceLoss::new(
                SoftTargetCe::from_labels(&labels, k, Rows::All)?,
                StatsMode::TrainStats,
            )),
        ),
        (
            "nhe-targets".into(),
            Box::new(TraceLoss::new(
                SoftTargetCe::new(nhe_targets(&labels, k)?, Rows::All),
                StatsMode::EvalStats,
            )),
        ),
    ];
    for o in [
        AttackObjective::Nhe,
        AttackObjective::Ble,
        AttackObjective::BnShift,
        AttackObjective::Maxce,
        AttackObjective::Tepa,
    ] {
        losses.push((o.name().into(), trace_obj(o)?));
    }
    losses.push((
        "bn-shift-direct".into(),
        Box::new(TraceLoss::new(
            BnShift::new(&spec, poison.clone(), direction.clone())?,
            StatsMode::TrainStats,
        )),
    ));
    for (name, kind) in [("moment-reg", Regularizer::MomentMatch), ("gaussian-kl-reg", Regularizer::GaussianKl)] {
        losses.push((
            name.into(),
            Box::new(FeatureRegularizer {
                kind,
                pool: pool.clone(),
                rows: poison.clone(),
                beta: 0.7,
            }),
        ));
    }
    losses.push((
        "dia-unrolled".into(),
        Box::new(DiaLoss {
            benign_labels: benign.iter().map(|&i| labels[i]).collect(),
            benign_rows: benign,
            classes: k,
            inner_lr: 0.5,
        }),
    ));

    let mut out = Vec::new();
    for (name, loss) in &losses {
        out.extend(check_loss(name, loss.as_ref(), &spec, &params, &x)?);
    }
    Ok(out)
}
