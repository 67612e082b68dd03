use std::fs;

use fedtta_core::federation::{AccessKind, Reader, RecordingMonitor};
use fedtta_core::harness::{emit_run, run, run_with_monitor, ExperimentConfig, Formats, Summary};
use fedtta_core::Error;

const SMALL: &str = r#"
seed = 3
clients = 4
adversaries = 2
batch_size = 20

[dataset]
classes = 3
dims = 8
samples_per_client = 200

[model]
hidden = [10]

[pretrain]
samples_per_class = 150
epochs = 30

[tta]
method = "tent"
lr = 0.5

[server]
rounds = 5
clip = 0.5

[attack]
objective = "nhe"
mode = "grey-box"
epsilon = 0.05
steps = 3
pool_size = 20
history = 2
"#;

fn config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(SMALL, &o).unwrap()
}

#[test]
fn zero_rounds_report_the_initial_models_only() {
    let r = run(&config(&["server.rounds=0"])).unwrap();
    assert!(r.outcome.metrics.is_empty());
    assert!(r.outcome.records.is_empty());
    assert!(r.outcome.attack_trace.is_empty());
    let s = &r.summary;
    assert_eq!(s.rounds, 0);
    assert_eq!(s.mean_overall, s.initial_overall);
    assert_eq!(s.final_overall, s.initial_overall);
}

#[test]
fn without_adversaries_attack_settings_are_inert() {
    let a = run(&config(&["adversaries=0"])).unwrap();
    let b = run(&config(&[
        "adversaries=0",
        "attack.objective=dia",
        "attack.mode=white-box",
        "attack.epsilon=0.2",
    ]))
    .unwrap();
    assert!(a.outcome.attack_trace.is_empty());
    assert_eq!(a.outcome.metrics, b.outcome.metrics);
    assert_eq!(a.outcome.records, b.outcome.records);
}

#[test]
fn client_scheduling_does_not_change_results() {
    for mode in ["grey-box", "white-box"] {
        let m = format!("attack.mode={mode}");
        let par = run(&config(&["parallel=true", &m])).unwrap();
        let seq = run(&config(&["parallel=false", &m])).unwrap();
        assert_eq!(par.outcome.metrics, seq.outcome.metrics, "{mode}");
        assert_eq!(par.outcome.records, seq.outcome.records, "{mode}");
    }
}

#[test]
fn clip_bound_holds_every_round() {
    let r = run(&config(&[])).unwrap();
    assert_eq!(r.outcome.records.len(), 5);
    for rec in &r.outcome.records {
        for &n in rec.norms_post.values() {
            assert!(n <= 0.5, "round {}: {n}", rec.round);
        }
    }
    assert!(r.summary.stealth.all_ok(), "{:?}", r.summary.stealth);
}

#[test]
fn grey_box_attackers_never_touch_honest_clients() {
    let monitor = RecordingMonitor::new();
    let r = run_with_monitor(&config(&[]), &monitor).unwrap();
    assert!(r.outcome.attack_trace.iter().any(|e| !e.fallback));
    assert!(monitor.attacker_violations().is_empty());
    // the attackers did read their own streams
    assert!(monitor
        .events()
        .iter()
        .any(|e| matches!(e.reader, Reader::Attacker(_)) && e.kind == AccessKind::Labels));
}

#[test]
fn white_box_oracle_reads_are_visible_to_the_audit() {
    let monitor = RecordingMonitor::new();
    run_with_monitor(&config(&["attack.mode=white-box"]), &monitor).unwrap();
    let v = monitor.attacker_violations();
    assert!(!v.is_empty());
    assert!(v.iter().all(|e| e.kind == AccessKind::Delta));
}

#[test]
fn emitted_files_are_reproducible_and_tagged() {
    let cfg = config(&[]);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        emit_run(d.path(), &run(&cfg).unwrap(), Formats::default()).unwrap();
    }
    let hash = cfg.hash();
    for name in ["metrics.csv", "summary.json", "rounds.jsonl", "attack.jsonl"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains(&hash), "{name} lacks the config hash");
    }
    let csv = fs::read_to_string(dirs[0].path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.server.rounds * cfg.clients);

    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dirs[0].path().join("summary.json")).unwrap()).unwrap();
    let back: Summary = serde_json::from_value(json.clone()).unwrap();
    assert_eq!(back.config_hash, hash);
    let cfg_back: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(cfg_back.hash(), hash);
}

#[test]
fn seeds_change_the_outcome() {
    let a = run(&config(&[])).unwrap();
    let b = run(&config(&["seed=4"])).unwrap();
    assert_ne!(a.outcome.metrics, b.outcome.metrics);
}

#[test]
fn invalid_configs_are_config_errors() {
    for bad in [
        "adversaries=5",
        "attack.poison_ratio=1.5",
        "attack.epsilon=-0.1",
        "server.clip=0",
        "tta.lr=0",
    ] {
        let o = vec![bad.to_string()];
        let err = ExperimentConfig::from_toml_str(SMALL, &o).and_then(|c| run(&c).map(|_| ()));
        assert!(matches!(err, Err(Error::Config(_))), "{bad}: {err:?}");
    }
}
