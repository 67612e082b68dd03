use rand::{Rng, SeedableRng};

use fedtta_core::attack::{
    craft_poisons, feature_moments, AttackConfig, AttackObjective, ConfusionTracker, CraftAux, Regularizer,
};
use fedtta_core::data::{corrupt, gen_source, Batch, Corruption, LabeledSet, SyntheticDomain};
use fedtta_core::federation::sample_clients;
use fedtta_core::harness::world::{accuracy, synthetic_domain};
use fedtta_core::harness::{pretrain_source, ExperimentConfig};
use fedtta_core::neural::{ModelSpec, ParamVector};
use fedtta_core::rng::SimRng;

#[test]
fn sampling_frequency_matches_the_rate() {
    let rounds = 10_000;
    for rate in [0.3, 0.7] {
        let mut hits = [0usize; 10];
        for r in 0..rounds {
            for i in sample_clients(r, 10, rate, 11) {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let f = h as f64 / rounds as f64;
            assert!((f - rate).abs() <= 0.02, "client {i} at rate {rate}: {f}");
        }
    }
}

#[test]
fn linear_probe_separates_two_clusters() {
    let set = SyntheticDomain::new(4, 2, 8, 0.02).unwrap().sample(1, 200).unwrap();
    let mut x = set.inputs().clone();
    let centre: Vec<f64> = (0..8).map(|d| (0..x.rows()).map(|i| x.get(i, d)).sum::<f64>() / x.rows() as f64).collect();
    for i in 0..x.rows() {
        for (v, c) in x.row_mut(i).iter_mut().zip(&centre) {
            *v -= c;
        }
    }
    let mut w = [0.0f64; 9];
    for _ in 0..2000 {
        let mut g = [0.0f64; 9];
        for (i, &y) in set.labels().iter().enumerate() {
            let row = x.row(i);
            let z = w[8] + row.iter().zip(&w[..8]).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            for (gd, &v) in g.iter_mut().zip(row) {
                *gd += err * v;
            }
            g[8] += err;
        }
        for (wd, gd) in w.iter_mut().zip(&g) {
            *wd -= 5.0 * gd / set.len() as f64;
        }
    }
    let correct = set
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let z = w[8] + x.row(i).iter().zip(&w[..8]).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (y == 1)
        })
        .count();
    assert!(correct as f64 / set.len() as f64 >= 0.99, "{correct}/{}", set.len());
}

#[test]
fn pretrained_source_is_accurate_and_hurt_by_corruption() {
    let cfg = ExperimentConfig { seed: 3, ..ExperimentConfig::default() };
    let src = pretrain_source(&cfg).unwrap();
    assert!(src.accuracy >= 0.95, "held-out accuracy {}", src.accuracy);
    let eval = synthetic_domain(&cfg).unwrap().sample(99, 200).unwrap();
    let clean = accuracy(&src.spec, &src.params, &eval).unwrap();
    for kind in Corruption::ALL {
        let mild = accuracy(&src.spec, &src.params, &corrupt(&eval, kind, 1, 9).unwrap()).unwrap();
        let severe = accuracy(&src.spec, &src.params, &corrupt(&eval, kind, 5, 9).unwrap()).unwrap();
        assert!(severe < clean, "{}: {severe} vs clean {clean}", kind.name());
        if kind == Corruption::Noise {
            assert!(severe < mild, "noise 5 {severe} vs noise 1 {mild}");
        }
    }
}

#[test]
fn random_labels_give_chance_accuracy() {
    let k = 4;
    let n = 4000;
    let spec = ModelSpec::mlp(6, &[8], k).unwrap();
    let params = ParamVector::init(&spec, &mut SimRng::seed_from_u64(1));
    let base = gen_source(2, k, 6, n / k).unwrap();
    let mut rng = SimRng::seed_from_u64(7);
    let labels: Vec<usize> = (0..base.len()).map(|_| rng.gen_range(0..k)).collect();
    let set = LabeledSet::new(base.inputs().clone(), labels, k).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let acc = accuracy(&spec, &params, &set).unwrap();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc} vs {p} ± {}", 3.0 * sigma);
}

#[test]
fn fixed_confusion_pattern_gives_a_stable_mapping() {
    // class y is mostly confused with (y + 2) mod 5
    let k = 5;
    let labels: Vec<usize> = (0..50).map(|i| i % k).collect();
    let preds: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if i % 10 < 7 { y } else { (y + 2) % k })
        .collect();
    let mut t = ConfusionTracker::new(k, 0.2).unwrap();
    let mut history = Vec::new();
    for _ in 0..40 {
        t.update(&preds, &labels).unwrap();
        history.push(t.mapping().to_vec());
    }
    let last = history.last().unwrap();
    assert!(history[history.len() - 10..].iter().all(|m| m == last));
    assert_eq!(last, &(0..k).map(|y| (y + 2) % k).collect::<Vec<_>>());
}

#[test]
fn bn_shift_alignment_grows_along_the_pgd_trajectory() {
    let spec = ModelSpec::mlp(5, &[6], 3).unwrap();
    let params = ParamVector::init(&spec, &mut SimRng::seed_from_u64(4));
    let set = gen_source(8, 3, 5, 8).unwrap();
    let labels = set.labels().to_vec();
    let clean = Batch::new(set.inputs().clone(), Some(labels.clone())).unwrap();
    let pool = feature_moments(set.inputs(), &spec, &params, &spec.tapped_layers()).unwrap();
    let width = 2 * 6;
    let mut rng = SimRng::seed_from_u64(5);
    let mut dir: Vec<f64> = (0..width).map(|_| rng.gen::<f64>() - 0.5).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= n);
    let aux = CraftAux { mapping: None, bn_direction: Some(&dir), inner_lr: 0.1 };
    let mut alignment = Vec::new();
    for steps in 0..=8 {
        let cfg = AttackConfig {
            objective: AttackObjective::BnShift,
            regularizer: Regularizer::None,
            epsilon: 0.05,
            step_size: Some(0.002),
            steps,
            poison_ratio: 0.25,
            ..AttackConfig::default()
        };
        let out = craft_poisons(&clean, &labels, &cfg, &params, &spec, &pool, &aux).unwrap();
        alignment.push(-out.objective_after);
    }
    for w in alignment.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "{alignment:?}");
    }
    assert!(alignment[8] > alignment[0]);
}
