//! Forward pass, reverse pass and the loss interfaces built on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::matrix::Matrix;
use crate::neural::params::{ParamDelta, ParamLayout, ParamRole, ParamVector, RoleMask};
use crate::neural::scalar::Real;
use crate::neural::spec::{LayerKind, ModelSpec};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// Batch-norm layers normalise with the current batch statistics.
    TrainStats,
    /// Batch-norm layers normalise with the running statistics in θ.
    EvalStats,
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Matrix<T>,
}

/// Everything the reverse pass needs, plus the posteriors and taps.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f64> {
    mode: StatsMode,
    acts: Vec<Matrix<T>>,
    probs: Matrix<T>,
    bn: Vec<Option<BnCache<T>>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].rows()
    }

    pub fn logits(&self) -> &Matrix<T> {
        self.acts.last().expect("trace has activations")
    }

    pub fn probabilities(&self) -> &Matrix<T> {
        &self.probs
    }

    /// Activation `idx`: `0` is the input, `l + 1` the output of layer `l`.
    pub fn activation(&self, idx: usize) -> &Matrix<T> {
        &self.acts[idx]
    }

    pub fn num_activations(&self) -> usize {
        self.acts.len()
    }

    /// Output of a tapped layer.
    pub fn tap(&self, spec: &ModelSpec, layer: usize) -> Result<&Matrix<T>> {
        if !spec.is_tapped(layer) {
            return Err(Error::config(format!("layer {layer} is not a feature tap")));
        }
        Ok(&self.acts[layer + 1])
    }

    /// Statistics a batch-norm layer normalised with: batch statistics in
    /// train mode, running statistics in eval mode.
    pub fn bn_statistics(&self, layer: usize) -> Option<(&[T], &[T])> {
        self.bn
            .get(layer)
            .and_then(Option::as_ref)
            .map(|c| (c.mean.as_slice(), c.var.as_slice()))
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .row_iter()
            .map(|r| argmax(r.iter().map(|v| v.re())))
            .collect()
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Row-wise softmax with max-shift.
pub(crate) fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let shift = T::from_f64(max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - shift).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn forward_values<T: Real>(
    spec: &ModelSpec,
    layout: &ParamLayout,
    values: &[T],
    inputs: &Matrix<T>,
    mode: StatsMode,
) -> Result<ForwardTrace<T>> {
    if values.len() != layout.len() {
        return Err(Error::dim("parameter vector does not match the model"));
    }
    if inputs.cols() != spec.input_width() {
        return Err(Error::dim(format!(
            "batch width {} but model expects {}",
            inputs.cols(),
            spec.input_width()
        )));
    }
    let b = inputs.rows();
    if b == 0 {
        return Err(Error::DegenerateBatch(0));
    }
    if mode == StatsMode::TrainStats && b < 2 {
        return Err(Error::DegenerateBatch(b));
    }

    let mut acts = Vec::with_capacity(spec.layers().len() + 1);
    let mut bn = Vec::with_capacity(spec.layers().len());
    acts.push(inputs.clone());

    for (li, layer) in spec.layers().iter().enumerate() {
        let x = acts.last().expect("input pushed");
        let (out, cache) = match layer.kind {
            LayerKind::Dense => {
                let w = &values[layout.range(li, ParamRole::Weight)];
                let bias = &values[layout.range(li, ParamRole::Bias)];
                let (n_in, n_out) = (layer.input, layer.output);
                let mut y = Matrix::zeros(b, n_out);
                for i in 0..b {
                    let xi = x.row(i);
                    let yi = y.row_mut(i);
                    for o in 0..n_out {
                        let wo = &w[o * n_in..(o + 1) * n_in];
                        let mut acc = bias[o];
                        for k in 0..n_in {
                            acc += wo[k] * xi[k];
                        }
                        yi[o] = acc;
                    }
                }
                (y, None)
            }
            LayerKind::Batchnorm => {
                let c = layer.output;
                let gamma = &values[layout.range(li, ParamRole::BnGamma)];
                let beta = &values[layout.range(li, ParamRole::BnBeta)];
                let (mean, var) = match mode {
                    StatsMode::TrainStats => column_moments(x),
                    StatsMode::EvalStats => (
                        values[layout.range(li, ParamRole::BnRunningMean)].to_vec(),
                        values[layout.range(li, ParamRole::BnRunningVar)].to_vec(),
                    ),
                };
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::one() / (v + T::from_f64(BN_EPS)).sqrt())
                    .collect();
                let mut xhat = Matrix::zeros(b, c);
                let mut y = Matrix::zeros(b, c);
                for i in 0..b {
                    for j in 0..c {
                        let h = (x.get(i, j) - mean[j]) * inv_std[j];
                        xhat.set(i, j, h);
                        y.set(i, j, gamma[j] * h + beta[j]);
                    }
                }
                (
                    y,
                    Some(BnCache {
                        mean,
                        var,
                        inv_std,
                        xhat,
                    }),
                )
            }
            LayerKind::Relu => (
                x.map(|v| if v.re() > 0.0 { v } else { T::zero() }),
                None,
            ),
            LayerKind::SoftmaxHead => (x.clone(), None),
        };
        acts.push(out);
        bn.push(cache);
    }

    let probs = softmax_rows(acts.last().expect("logits"));
    Ok(ForwardTrace {
        mode,
        acts,
        probs,
        bn,
    })
}

/// Per-column mean and population variance (two-pass).
pub(crate) fn column_moments<T: Real>(x: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let (b, c) = (x.rows(), x.cols());
    let inv_b = 1.0 / b as f64;
    let mut mean = vec![T::zero(); c];
    for row in x.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m = m.scale(inv_b);
    }
    let mut var = vec![T::zero(); c];
    for row in x.row_iter() {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v = v.scale(inv_b);
    }
    (mean, var)
}

/// Gradients injected at activations. Entry `idx` is ∂L/∂activation[idx]
/// holding the other activations fixed.
#[derive(Clone, Debug)]
pub struct Adjoint<T = f64> {
    acts: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Adjoint<T> {
    pub fn for_trace(trace: &ForwardTrace<T>) -> Self {
        Self {
            acts: vec![None; trace.num_activations()],
        }
    }

    pub fn add(&mut self, idx: usize, grad: Matrix<T>) -> Result<()> {
        let slot = self
            .acts
            .get_mut(idx)
            .ok_or_else(|| Error::UnsupportedLoss(format!("no activation {idx}")))?;
        match slot {
            Some(existing) => {
                if (existing.rows(), existing.cols()) != (grad.rows(), grad.cols()) {
                    return Err(Error::dim("adjoint shape mismatch"));
                }
                existing.add_assign(&grad);
            }
            None => *slot = Some(grad),
        }
        Ok(())
    }

    pub fn add_logits(&mut self, grad: Matrix<T>) -> Result<()> {
        let last = self.acts.len() - 1;
        self.add(last, grad)
    }

    pub fn merge(&mut self, other: Adjoint<T>, k: f64) -> Result<()> {
        for (idx, g) in other.acts.into_iter().enumerate() {
            if let Some(mut g) = g {
                g.scale_in_place(k);
                self.add(idx, g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn backward_values<T: Real>(
    spec: &ModelSpec,
    layout: &ParamLayout,
    values: &[T],
    trace: &ForwardTrace<T>,
    adjoint: Adjoint<T>,
) -> Result<(Vec<T>, Matrix<T>)> {
    let n = spec.layers().len();
    if adjoint.acts.len() != n + 1 {
        return Err(Error::UnsupportedLoss("adjoint built for another model".into()));
    }
    let b = trace.batch_size();
    let mut pgrad = vec![T::zero(); values.len()];
    let mut injected = adjoint.acts;
    let mut g = injected[n]
        .take()
        .unwrap_or_else(|| Matrix::zeros(b, spec.classes()));

    for li in (0..n).rev() {
        let layer = &spec.layers()[li];
        let x = &trace.acts[li];
        let mut gx = match layer.kind {
            LayerKind::Dense => {
                let (n_in, n_out) = (layer.input, layer.output);
                let wr = layout.range(li, ParamRole::Weight);
                let br = layout.range(li, ParamRole::Bias);
                let w = &values[wr.clone()];
                let mut gx = Matrix::zeros(b, n_in);
                for i in 0..b {
                    let gi = g.row(i);
                    let xi = x.row(i);
                    for o in 0..n_out {
                        let go = gi[o];
                        pgrad[br.start + o] += go;
                        let wo = wr.start + o * n_in;
                        for k in 0..n_in {
                            pgrad[wo + k] += go * xi[k];
                        }
                    }
                    let gxi = gx.row_mut(i);
                    for o in 0..n_out {
                        let go = gi[o];
                        let row = &w[o * n_in..(o + 1) * n_in];
                        for k in 0..n_in {
                            gxi[k] += go * row[k];
                        }
                    }
                }
                gx
            }
            LayerKind::Batchnorm => {
                let c = layer.output;
                let cache = trace.bn[li].as_ref().expect("batchnorm cache");
                let gamma = &values[layout.range(li, ParamRole::BnGamma)];
                let gr = layout.range(li, ParamRole::BnGamma);
                let betar = layout.range(li, ParamRole::BnBeta);
                let mut dxhat = Matrix::zeros(b, c);
                for i in 0..b {
                    for j in 0..c {
                        let gij = g.get(i, j);
                        pgrad[gr.start + j] += gij * cache.xhat.get(i, j);
                        pgrad[betar.start + j] += gij;
                        dxhat.set(i, j, gij * gamma[j]);
                    }
                }
                let mut gx = Matrix::zeros(b, c);
                match trace.mode {
                    StatsMode::TrainStats => {
                        let inv_b = 1.0 / b as f64;
                        for j in 0..c {
                            let mut sum = T::zero();
                            let mut sum_x = T::zero();
                            for i in 0..b {
                                sum += dxhat.get(i, j);
                                sum_x += dxhat.get(i, j) * cache.xhat.get(i, j);
                            }
                            for i in 0..b {
                                let v = dxhat.get(i, j) - sum.scale(inv_b)
                                    - cache.xhat.get(i, j) * sum_x.scale(inv_b);
                                gx.set(i, j, v * cache.inv_std[j]);
                            }
                        }
                    }
                    StatsMode::EvalStats => {
                        let mr = layout.range(li, ParamRole::BnRunningMean);
                        let vr = layout.range(li, ParamRole::BnRunningVar);
                        for j in 0..c {
                            let s = cache.inv_std[j];
                            let s3 = s * s * s;
                            for i in 0..b {
                                let d = dxhat.get(i, j);
                                gx.set(i, j, d * s);
                                pgrad[mr.start + j] -= d * s;
                                pgrad[vr.start + j] -=
                                    (d * (x.get(i, j) - cache.mean[j]) * s3).scale(0.5);
                            }
                        }
                    }
                }
                gx
            }
            LayerKind::Relu => {
                let mut gx = g.clone();
                for (gv, xv) in gx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv.re() <= 0.0 {
                        *gv = T::zero();
                    }
                }
                gx
            }
            LayerKind::SoftmaxHead => g.clone(),
        };
        if let Some(extra) = injected[li].take() {
            gx.add_assign(&extra);
        }
        g = gx;
    }
    Ok((pgrad, g))
}

/// A differentiable scalar function of one forward trace.
pub trait Objective<T: Real = f64>: Send + Sync {
    fn name(&self) -> String;

    /// Value and the adjoint it injects into the trace.
    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)>;

    fn differentiable(&self) -> bool {
        true
    }
}

impl<T: Real, O: Objective<T> + ?Sized> Objective<T> for Box<O> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn evaluate(&self, trace: &ForwardTrace<T>) -> Result<(T, Adjoint<T>)> {
        (**self).evaluate(trace)
    }
    fn differentiable(&self) -> bool {
        (**self).differentiable()
    }
}

/// Value and gradients of a loss with respect to parameters and inputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub value: f64,
    pub params: ParamDelta,
    pub inputs: Matrix,
}

/// A registered loss: any scalar function of (params, inputs) with exact
/// gradients.
pub trait LossFn: Send + Sync {
    fn name(&self) -> String;

    fn value(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<f64>;

    fn value_and_grads(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        mask: RoleMask,
    ) -> Result<LossGrads>;

    fn differentiable(&self) -> bool {
        true
    }
}

/// An [`Objective`] evaluated on a single forward pass in a fixed mode.
pub struct TraceLoss<O> {
    pub objective: O,
    pub mode: StatsMode,
}

impl<O> TraceLoss<O> {
    pub fn new(objective: O, mode: StatsMode) -> Self {
        Self { objective, mode }
    }
}

impl<O: Objective> LossFn for TraceLoss<O> {
    fn name(&self) -> String {
        self.objective.name()
    }

    fn value(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<f64> {
        let trace = forward(spec, params, inputs, self.mode)?;
        Ok(self.objective.evaluate(&trace)?.0)
    }

    fn value_and_grads(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        mask: RoleMask,
    ) -> Result<LossGrads> {
        let trace = forward(spec, params, inputs, self.mode)?;
        let (value, adjoint) = self.objective.evaluate(&trace)?;
        let (pg, ig) = backward_values(spec, params.layout(), params.values(), &trace, adjoint)?;
        Ok(LossGrads {
            value,
            params: ParamDelta::masked(params.layout().clone(), pg, mask),
            inputs: ig,
        })
    }

    fn differentiable(&self) -> bool {
        self.objective.differentiable()
    }
}

/// Weighted sum of losses.
#[derive(Default)]
pub struct SumLoss {
    terms: Vec<(f64, Box<dyn LossFn>)>,
}

impl SumLoss {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, weight: f64, loss: Box<dyn LossFn>) -> Self {
        self.terms.push((weight, loss));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

impl LossFn for SumLoss {
    fn name(&self) -> String {
        self.terms
            .iter()
            .map(|(w, l)| format!("{w}*{}", l.name()))
            .collect::<Vec<_>>()
            .join(" + ")
    }

    fn value(&self, spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for (w, l) in &self.terms {
            if *w != 0.0 {
                total += w * l.value(spec, params, inputs)?;
            }
        }
        Ok(total)
    }

    fn value_and_grads(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        inputs: &Matrix,
        mask: RoleMask,
    ) -> Result<LossGrads> {
        let mut out = LossGrads {
            value: 0.0,
            params: ParamDelta::zeros(params.layout().clone(), mask),
            inputs: Matrix::zeros(inputs.rows(), inputs.cols()),
        };
        for (w, l) in &self.terms {
            if *w == 0.0 {
                continue;
            }
            let g = l.value_and_grads(spec, params, inputs, mask)?;
            out.value += w * g.value;
            out.params = out.params.add_scaled(*w, &g.params)?;
            let mut gi = g.inputs;
            gi.scale_in_place(*w);
            out.inputs.add_assign(&gi);
        }
        Ok(out)
    }

    fn differentiable(&self) -> bool {
        self.terms.iter().all(|(_, l)| l.differentiable())
    }
}

pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    mode: StatsMode,
) -> Result<ForwardTrace> {
    let layout: &Arc<ParamLayout> = params.layout();
    forward_values(spec, layout, params.values(), inputs, mode)
}

/// Reverse pass over an existing trace. Returns parameter gradients
/// restricted to `mask` and input gradients.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    adjoint: Adjoint,
    mask: RoleMask,
) -> Result<(ParamDelta, Matrix)> {
    let (pg, ig) = backward_values(spec, params.layout(), params.values(), trace, adjoint)?;
    Ok((ParamDelta::masked(params.layout().clone(), pg, mask), ig))
}

/// Exact gradient of `loss` with respect to the parameter roles in `mask`;
/// all other slices are zero.
pub fn grad_params(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    loss: &dyn LossFn,
    mask: RoleMask,
) -> Result<ParamDelta> {
    if !loss.differentiable() {
        return Err(Error::UnsupportedLoss(loss.name()));
    }
    Ok(loss.value_and_grads(spec, params, inputs, mask)?.params)
}

/// Exact gradient of `loss` with respect to the batch inputs.
pub fn grad_inputs(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    loss: &dyn LossFn,
) -> Result<Matrix> {
    if !loss.differentiable() {
        return Err(Error::UnsupportedLoss(loss.name()));
    }
    Ok(loss
        .value_and_grads(spec, params, inputs, RoleMask::empty())?
        .inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::losses::MeanEntropy;
    use crate::neural::spec::LayerSpec;
    use crate::neural::scalar::Dual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_setup(seed: u64, b: usize) -> (ModelSpec, ParamVector, Matrix) {
        let spec = ModelSpec::mlp(4, &[6], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamVector::init(&spec, &mut rng);
        for v in p.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        for v in p.slice_mut(1, ParamRole::BnRunningVar) {
            *v = v.abs() + 0.5;
        }
        let x = Matrix::from_vec(b, 4, (0..b * 4).map(|_| rng.gen::<f64>()).collect()).unwrap();
        (spec, p, x)
    }

    /// Straight-line recomputation of dense → BN → relu → dense → softmax.
    fn oracle(p: &ParamVector, x: &Matrix, train: bool) -> Vec<Vec<f64>> {
        let w1 = p.slice(0, ParamRole::Weight);
        let b1 = p.slice(0, ParamRole::Bias);
        let g = p.slice(1, ParamRole::BnGamma);
        let be = p.slice(1, ParamRole::BnBeta);
        let w2 = p.slice(3, ParamRole::Weight);
        let b2 = p.slice(3, ParamRole::Bias);
        let n = x.rows();
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..6)
                    .map(|o| b1[o] + (0..4).map(|k| w1[o * 4 + k] * x.get(i, k)).sum::<f64>())
                    .collect()
            })
            .collect();
        let (mu, var): (Vec<f64>, Vec<f64>) = if train {
            (0..6)
                .map(|c| {
                    let m = h.iter().map(|r| r[c]).sum::<f64>() / n as f64;
                    let v = h.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n as f64;
                    (m, v)
                })
                .unzip()
        } else {
            (
                p.slice(1, ParamRole::BnRunningMean).to_vec(),
                p.slice(1, ParamRole::BnRunningVar).to_vec(),
            )
        };
        h.iter()
            .map(|r| {
                let a: Vec<f64> = (0..6)
                    .map(|c| (g[c] * (r[c] - mu[c]) / (var[c] + BN_EPS).sqrt() + be[c]).max(0.0))
                    .collect();
                let z: Vec<f64> = (0..3)
                    .map(|o| b2[o] + (0..6).map(|k| w2[o * 6 + k] * a[k]).sum::<f64>())
                    .collect();
                let s: f64 = z.iter().map(|v| v.exp()).sum();
                z.iter().map(|v| v.exp() / s).collect()
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_oracle() {
        for (seed, mode) in [(1, StatsMode::TrainStats), (2, StatsMode::EvalStats)] {
            let (spec, p, x) = random_setup(seed, 7);
            let t = forward(&spec, &p, &x, mode).unwrap();
            let o = oracle(&p, &x, mode == StatsMode::TrainStats);
            for (i, row) in o.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert!((t.probabilities().get(i, j) - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = ModelSpec::unchecked(vec![
            LayerSpec::dense(3, 3),
            LayerSpec::softmax_head(3),
        ]);
        let layout = Arc::new(ParamLayout::for_spec(&spec));
        let mut p = ParamVector::zeros(layout);
        let w = p.slice_mut(0, ParamRole::Weight);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Matrix::from_rows(&[vec![0.1, -2.0, 3.5]]).unwrap();
        let t = forward(&spec, &p, &x, StatsMode::EvalStats).unwrap();
        assert_eq!(t.logits(), &x);
    }

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let (spec, mut p, x) = random_setup(3, 5);
        p.slice_mut(3, ParamRole::Weight).fill(0.0);
        p.slice_mut(3, ParamRole::Bias).fill(0.7);
        let t = forward(&spec, &p, &x, StatsMode::EvalStats).unwrap();
        assert!(t
            .probabilities()
            .as_slice()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn shape_and_batch_errors() {
        let (spec, p, _) = random_setup(4, 2);
        let wrong = Matrix::zeros(3, 5);
        assert!(matches!(
            forward(&spec, &p, &wrong, StatsMode::EvalStats),
            Err(Error::Dimension(_))
        ));
        let one = Matrix::zeros(1, 4);
        assert!(matches!(
            forward(&spec, &p, &one, StatsMode::TrainStats),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(forward(&spec, &p, &one, StatsMode::EvalStats).is_ok());
    }

    #[test]
    fn train_mode_ignores_running_statistics() {
        let (spec, p, x) = random_setup(5, 6);
        let mut q = p.clone();
        q.slice_mut(1, ParamRole::BnRunningMean).fill(9.0);
        q.slice_mut(1, ParamRole::BnRunningVar).fill(4.0);
        let a = forward(&spec, &p, &x, StatsMode::TrainStats).unwrap();
        let b = forward(&spec, &q, &x, StatsMode::TrainStats).unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
    }

    #[test]
    fn dual_pass_tracks_parameter_direction() {
        let (spec, p, x) = random_setup(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let dir: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vals: Vec<Dual> = p
            .values()
            .iter()
            .zip(&dir)
            .map(|(&v, &d)| Dual::new(v, d))
            .collect();
        let xd = x.map(|v| Dual::new(v, 0.0));
        let t = forward_values(&spec, p.layout(), &vals, &xd, StatsMode::TrainStats).unwrap();
        let (h, _) = Objective::<Dual>::evaluate(&MeanEntropy::default(), &t).unwrap();
        let loss = TraceLoss::new(MeanEntropy::default(), StatsMode::TrainStats);
        let g = loss
            .value_and_grads(&spec, &p, &x, RoleMask::all())
            .unwrap();
        let directional: f64 = g.params.values().iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((h.eps - directional).abs() < 1e-10 * directional.abs().max(1.0));
    }
}
