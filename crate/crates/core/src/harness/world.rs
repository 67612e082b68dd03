use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::data::{load_cifar10c, partition, Batch, ClientStream, Corruption, Domain, LabeledSet, Role, SyntheticDomain};
use crate::error::{Error, Result};
use crate::federation::World;
use crate::neural::{
    forward, LossFn, ModelSpec, ParamRole, ParamVector, RoleMask, Rows, SoftTargetCe, StatsMode, TraceLoss,
};
use crate::rng::{derive_seed, rng_for, tag};

use super::config::{parse_domain, DatasetKind, ExperimentConfig};

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub accuracy: f64,
    pub epochs: usize,
}

pub fn model_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    ModelSpec::mlp(cfg.dataset.dims, &cfg.model.hidden, cfg.dataset.classes)
}

pub fn synthetic_domain(cfg: &ExperimentConfig) -> Result<SyntheticDomain> {
    let d = &cfg.dataset;
    SyntheticDomain::new(cfg.seed, d.classes, d.dims, d.spread)
}

/// Eval-stats accuracy.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, set: &LabeledSet) -> Result<f64> {
    let preds = forward(spec, params, set.inputs(), StatsMode::EvalStats)?.predictions();
    let hits = preds.iter().zip(set.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Set every BN layer's running statistics to the full-set batch
/// statistics.
fn calibrate_running_stats(spec: &ModelSpec, params: &mut ParamVector, set: &LabeledSet) -> Result<()> {
    let trace = forward(spec, params, set.inputs(), StatsMode::TrainStats)?;
    for l in spec.batchnorm_layers() {
        let (mean, var) = trace.bn_statistics(l).expect("train-mode trace");
        let (mean, var) = (mean.to_vec(), var.to_vec());
        params.slice_mut(l, ParamRole::BnRunningMean).copy_from_slice(&mean);
        params.slice_mut(l, ParamRole::BnRunningVar).copy_from_slice(&var);
    }
    Ok(())
}

/// Supervised training on clean synthetic source data until the held-out
/// accuracy target or the epoch cap.
pub fn pretrain_source(cfg: &ExperimentConfig) -> Result<Pretrained> {
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(Error::config("source pretraining needs the synthetic dataset"));
    }
    let p = &cfg.pretrain;
    let spec = model_spec(cfg)?;
    let domain = synthetic_domain(cfg)?;
    let train = domain.sample(derive_seed(cfg.seed, &[tag::PRETRAIN, 0]), p.samples_per_class)?;
    let held = domain.sample(
        derive_seed(cfg.seed, &[tag::PRETRAIN, 1]),
        (p.samples_per_class / 4).max(10),
    )?;
    let mut params = ParamVector::init(&spec, &mut rng_for(cfg.seed, &[tag::INIT]));
    let mut acc = 0.0;
    let mut epochs = 0;
    for epoch in 0..p.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[tag::PRETRAIN, 2, epoch as u64]));
        let mut chunks: Vec<&[usize]> = order.chunks(p.batch).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
        }
        for idx in chunks {
            let (x, y) = train.subset_unchecked(idx);
            let loss = TraceLoss::new(
                SoftTargetCe::from_labels(&y, spec.classes(), Rows::All)?,
                StatsMode::TrainStats,
            );
            let g = loss.value_and_grads(&spec, &params, &x, RoleMask::TRAINABLE)?;
            crate::tta::descend(&mut params, &g.params, p.lr, None)?;
        }
        calibrate_running_stats(&spec, &mut params, &train)?;
        if !params.is_finite() {
            return Err(Error::Numeric("pretraining diverged".into()));
        }
        epochs = epoch + 1;
        acc = accuracy(&spec, &params, &held)?;
        if acc >= p.target_accuracy {
            break;
        }
    }
    if acc < 0.6 {
        return Err(Error::config(format!(
            "source model reached only {:.1}% accuracy; the model is too small",
            100.0 * acc
        )));
    }
    Ok(Pretrained {
        spec,
        params,
        accuracy: acc,
        epochs,
    })
}

fn synthetic_domains(cfg: &ExperimentConfig) -> Result<Vec<Domain>> {
    let Some(list) = &cfg.dataset.domains else {
        return Ok(crate::data::default_assignment(cfg.clients));
    };
    if list.is_empty() {
        return Err(Error::config("domain list is empty"));
    }
    let parsed = list
        .iter()
        .map(|s| {
            let (name, severity) = parse_domain(s)?;
            Ok(Domain {
                kind: name.parse::<Corruption>()?,
                severity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..cfg.clients).map(|i| parsed[i % parsed.len()]).collect())
}

fn cifar_streams(cfg: &ExperimentConfig) -> Result<Vec<ClientStream>> {
    let dir = cfg
        .dataset
        .path
        .as_ref()
        .ok_or_else(|| Error::config("CIFAR-10-C mode needs dataset.path"))?;
    let domains = cfg
        .dataset
        .domains
        .as_ref()
        .ok_or_else(|| Error::config("CIFAR-10-C mode needs dataset.domains"))?;
    let mut out = Vec::with_capacity(cfg.clients);
    for i in 0..cfg.clients {
        let (name, severity) = parse_domain(&domains[i % domains.len()])?;
        let set = load_cifar10c(dir, &name, severity)?;
        // clients sharing a corruption take disjoint slices
        let sharing: Vec<usize> = (0..cfg.clients)
            .filter(|&j| domains[j % domains.len()] == domains[i % domains.len()])
            .collect();
        let slot = sharing.iter().position(|&j| j == i).expect("member");
        let share = set.len() / sharing.len();
        let take = cfg.dataset.samples_per_client.min(share);
        let idx: Vec<usize> = (slot * share..slot * share + take).collect();
        let batches = idx
            .chunks(cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| {
                let (x, y) = set.subset_unchecked(c);
                Batch::new(x, Some(y))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ClientStream {
            id: i,
            batches,
            domain: Domain {
                kind: Corruption::External,
                severity,
            },
            role: Role::Benign,
        });
    }
    Ok(out)
}

/// Client streams for the configured dataset, roles assigned.
pub fn build_streams(cfg: &ExperimentConfig) -> Result<Vec<ClientStream>> {
    let mut streams = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let domain = synthetic_domain(cfg)?;
            let total = cfg.clients * cfg.dataset.samples_per_client;
            let per_class = total.div_ceil(cfg.dataset.classes);
            let set = domain.sample(derive_seed(cfg.seed, &[tag::DATA, 2]), per_class)?;
            partition(&set, cfg.clients, &synthetic_domains(cfg)?, cfg.batch_size, true, cfg.seed)?
        }
        DatasetKind::Cifar10c => cifar_streams(cfg)?,
    };
    for s in &mut streams {
        s.role = if s.id < cfg.adversaries {
            Role::Adversarial
        } else {
            Role::Benign
        };
    }
    Ok(streams)
}

/// Source model: pretrained for synthetic data, loaded for CIFAR-10-C.
pub fn source_model(cfg: &ExperimentConfig) -> Result<(ModelSpec, ParamVector)> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let p = pretrain_source(cfg)?;
            Ok((p.spec, p.params))
        }
        DatasetKind::Cifar10c => {
            let path = cfg
                .dataset
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("CIFAR-10-C mode needs dataset.checkpoint"))?;
            let spec = model_spec(cfg)?;
            let params = ParamVector::load(path)?;
            if params.layout().as_ref() != &crate::neural::ParamLayout::for_spec(&spec) {
                return Err(Error::config("checkpoint does not match the model config"));
            }
            Ok((spec, params))
        }
    }
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let (spec, source) = source_model(cfg)?;
    Ok(World {
        spec,
        source: Arc::new(source),
        streams: build_streams(cfg)?,
        adversaries: cfg.adversaries,
        benign_tta: cfg.tta.clone(),
        attacker_tta: cfg.attacker_tta().clone(),
        server: cfg.server.clone(),
        attack: cfg.attack.clone(),
        batches_per_round: cfg.batches_per_round,
        continual: cfg.continual,
        parallel: cfg.parallel,
        seed: cfg.seed,
    })
}
