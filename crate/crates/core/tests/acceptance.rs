//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedtta_core::attack::{gaussian_kl, nhe_targets, AttackMode, SurrogateState};
use fedtta_core::federation::{
    aggregate, clip_delta, normalised_weights, Aggregated, RecordingMonitor, ServerConfig, Strategy,
};
use fedtta_core::harness::gradcheck::run_gradcheck;
use fedtta_core::harness::{
    emit_run, emit_sweep, run, run_with_monitor, sweep, ExperimentConfig, Formats, RunResult, SweepAxis,
};
use fedtta_core::neural::{entropy, param_axpy, Matrix, ModelSpec, ParamDelta, ParamVector, RoleMask};
use fedtta_core::rng::rng_for;
use fedtta_core::Result;

const DEGRADATION: f64 = 0.02;
const TTA_GAIN: f64 = 0.02;
const SURROGATE_TOL: f64 = 1e-10;
const CLOSED_FORM_TOL: f64 = 1e-12;
const QUADRATURE_TOL: f64 = 1e-6;
const SEEDS_TABLE: u64 = 5;
const SEEDS_TREND: usize = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, t: Instant, v: Verdict) -> Verdict {
    let took = t.elapsed();
    let pass = v.pass && took < limit;
    verdict(pass, format!("{} [{:.1}s of {}s]", v.detail, took.as_secs_f64(), limit.as_secs()))
}

fn majority(hits: usize, of: usize) -> bool {
    2 * hits > of
}

fn base_config() -> Result<ExperimentConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    ExperimentConfig::load(&path, &[])
}

fn with(cfg: &ExperimentConfig, f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = cfg.clone();
    f(&mut c);
    c
}

fn gradients() -> Result<Verdict> {
    let t = Instant::now();
    let results = run_gradcheck()?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.loss, r.wrt))
        .collect();
    let v = verdict(
        failed.is_empty(),
        format!("{} checks, worst rel err {worst:.2e}, failed {failed:?}", results.len()),
    );
    Ok(within(Duration::from_secs(60), t, v))
}

fn aggregation() -> Result<Verdict> {
    let t = Instant::now();
    let spec = ModelSpec::mlp(1, &[1], 2)?;
    let p = ParamVector::init(&spec, &mut rng_for(0, &[]));
    let layout = p.layout().clone();
    let mut theta = p.clone();
    theta.values_mut()[..2].copy_from_slice(&[1.0, 2.0]);
    let unit = |i: usize, v: f64| {
        let mut d = vec![0.0; p.len()];
        d[i] = v;
        ParamDelta::masked(layout.clone(), d, RoleMask::all())
    };
    let mut ok = Vec::new();

    // equal weights: θ + (Δ1 + Δ2)/2
    let deltas: BTreeMap<usize, ParamDelta> = [(0, unit(0, 2.0)), (1, unit(1, 2.0))].into();
    let equal: BTreeMap<usize, f64> = [(0, 1.0), (1, 1.0)].into();
    let g = match aggregate(&theta, &deltas, &equal, &ServerConfig::default())? {
        Aggregated::Global(g) => g,
        Aggregated::Personalised(_) => unreachable!(),
    };
    ok.push(("fedavg equal", g.values()[..2] == [2.0, 3.0]));

    // 3:1 weights
    let skew: BTreeMap<usize, f64> = [(0, 3.0), (1, 1.0)].into();
    let g = match aggregate(&theta, &deltas, &skew, &ServerConfig::default())? {
        Aggregated::Global(g) => g,
        Aggregated::Personalised(_) => unreachable!(),
    };
    ok.push(("fedavg weighted", g.values()[..2] == [2.5, 2.5]));

    let w = normalised_weights(&[0, 1, 2], &[(0, 0.25), (1, 0.5), (2, 0.25)].into())?;
    ok.push(("normalisation", w == [0.25, 0.5, 0.25]));

    // identical deltas are a fixed point of every strategy
    let same: BTreeMap<usize, ParamDelta> = (0..3).map(|i| (i, unit(0, 0.5))).collect();
    let ones: BTreeMap<usize, f64> = (0..3).map(|i| (i, 1.0)).collect();
    let want = param_axpy(1.0, &unit(0, 0.5), &theta)?;
    let mut fixed = true;
    for strategy in [Strategy::FedAvg, Strategy::FedProx, Strategy::SimWeighted, Strategy::AmpWeighted] {
        let cfg = ServerConfig {
            strategy,
            ..ServerConfig::default()
        };
        let close = |g: &ParamVector| {
            g.values()
                .iter()
                .zip(want.values())
                .all(|(a, b)| (a - b).abs() <= CLOSED_FORM_TOL)
        };
        fixed &= match aggregate(&theta, &same, &ones, &cfg)? {
            Aggregated::Global(g) => close(&g),
            Aggregated::Personalised(m) => m.values().all(close),
        };
    }
    ok.push(("convexity fixed point", fixed));

    let big = unit(0, 3.0).add_scaled(1.0, &unit(1, 4.0))?;
    let c = clip_delta(&big, 1.0);
    let small = unit(0, 0.5);
    ok.push((
        "clip",
        c.norm() <= 1.0 && (c.values()[0] - 0.6).abs() < 1e-15 && clip_delta(&small, 1.0) == small,
    ));

    let failed: Vec<&str> = ok.iter().filter(|(_, b)| !b).map(|(n, _)| *n).collect();
    let v = verdict(failed.is_empty(), format!("{} hand cases, failed {failed:?}", ok.len()));
    Ok(within(Duration::from_secs(5), t, v))
}

fn surrogate() -> Result<Verdict> {
    let t = Instant::now();
    let spec = ModelSpec::mlp(3, &[4], 2)?;
    let theta0 = ParamVector::init(&spec, &mut rng_for(5, &[]));
    let layout = theta0.layout().clone();
    let delta = |seed: u64| {
        let mut rng = rng_for(seed, &[]);
        let v = (0..theta0.len())
            .map(|_| 0.02 * (rand::Rng::gen::<f64>(&mut rng) - 0.5))
            .collect();
        ParamDelta::masked(layout.clone(), v, RoleMask::BN_AFFINE)
    };
    // three clients with uniform weights; the two peers never change
    let (eta, w, k) = (1.0, 1.0 / 3.0, 3);
    let peers = [delta(11), delta(12)];
    let mine = delta(13);
    let pool = Matrix::from_vec(8, 3, (0..24).map(|i| ((i * 7) % 11) as f64 / 11.0).collect())?;
    let mut s = SurrogateState::new(k, eta, 0.5, 0.05)?;
    let mut theta = theta0;
    let (mut worst, mut kl_ok, mut checked) = (0.0f64, true, 0);
    for r in 0..12 {
        if r > 0 {
            if let Ok(rep) = s.distill_posterior(r, &theta, &pool, &spec) {
                kl_ok &= rep.kl_after <= rep.kl_before;
            }
        }
        s.update_history(r, &theta)?;
        let total = mine.scaled(w).add_scaled(w, &peers[0])?.add_scaled(w, &peers[1])?;
        let truth = param_axpy(eta, &total, &theta)?;
        if s.history_len() > k {
            let pred = s.predict_post_agg(&mine, w)?;
            worst = worst.max(pred.delta_from(&truth, RoleMask::all())?.norm_inf());
            checked += 1;
        }
        s.record_submission(r, &mine, w)?;
        theta = truth;
    }
    let v = verdict(
        checked > 0 && worst <= SURROGATE_TOL && kl_ok,
        format!("{checked} full-buffer rounds, max |pred-truth| {worst:.1e}, KL non-increasing {kl_ok}"),
    );
    Ok(within(Duration::from_secs(30), t, v))
}

/// Composite Simpson integral of p ln(p/q) for two normals.
fn kl_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let pdf = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let sd = v1.sqrt();
    let (a, b, n) = (m1 - 14.0 * sd, m1 + 14.0 * sd, 20_000);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let p = pdf(x, m1, v1);
        if p == 0.0 {
            0.0
        } else {
            p * (p.ln() - pdf(x, m2, v2).ln())
        }
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn closed_forms() -> Result<Verdict> {
    let t = nhe_targets(&[0, 2, 3], 4)?;
    let third = 1.0 / 3.0;
    let rows_ok = t.row(0) == [0.0, third, third, third] && t.row(1) == [third, third, 0.0, third];
    let mut uniform_err: f64 = 0.0;
    for k in [2usize, 3, 10, 100] {
        let h = entropy(&Matrix::filled(1, k, 1.0 / k as f64))?[0];
        uniform_err = uniform_err.max((h - (k as f64).ln()).abs());
    }
    let kl_err = (gaussian_kl(&[0.0], &[1.0], &[1.0], &[1.0]) - 0.5).abs();
    let mut quad_err: f64 = 0.0;
    for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 1.0), (0.3, 0.5, -0.2, 2.0), (1.0, 2.5, 0.0, 0.4), (-0.7, 0.1, 0.4, 0.3)] {
        quad_err = quad_err.max((gaussian_kl(&[m1], &[v1], &[m2], &[v2]) - kl_quadrature(m1, v1, m2, v2)).abs());
    }
    Ok(verdict(
        rows_ok && uniform_err <= CLOSED_FORM_TOL && kl_err <= CLOSED_FORM_TOL && quad_err <= QUADRATURE_TOL,
        format!(
            "notch rows {rows_ok}, |H(uniform)-ln K| {uniform_err:.1e}, |KL-0.5| {kl_err:.1e}, quadrature {quad_err:.1e}"
        ),
    ))
}

struct TableRuns {
    clean: Vec<RunResult>,
    attacked: Vec<RunResult>,
}

fn table_runs(base: &ExperimentConfig) -> Result<(TableRuns, Duration)> {
    let t = Instant::now();
    let mut clean = Vec::new();
    let mut attacked = Vec::new();
    for s in 0..SEEDS_TABLE {
        let seed = base.seed + s;
        attacked.push(run(&with(base, |c| c.seed = seed))?);
        clean.push(run(&with(base, |c| {
            c.seed = seed;
            c.adversaries = 0;
        }))?);
    }
    Ok((TableRuns { clean, attacked }, t.elapsed()))
}

fn table(runs: &TableRuns, took: Duration) -> Verdict {
    let drops: Vec<f64> = runs
        .clean
        .iter()
        .zip(&runs.attacked)
        .map(|(c, a)| c.summary.mean_overall - a.summary.mean_overall)
        .collect();
    let gains: Vec<f64> = runs
        .clean
        .iter()
        .map(|c| c.summary.mean_overall - c.summary.source_overall)
        .collect();
    let n = drops.len();
    let hit = drops.iter().filter(|&&d| d >= DEGRADATION).count();
    let gain_hit = gains.iter().filter(|&&g| g >= TTA_GAIN).count();
    let pct = |v: &[f64]| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/");
    let pass = majority(hit, n) && majority(gain_hit, n) && took < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "attack drop (pts) {} -> {hit}/{n} >= 2; tta over source (pts) {} -> {gain_hit}/{n} >= 2 [{:.1}s of 600s]",
            pct(&drops),
            pct(&gains),
            took.as_secs_f64()
        ),
    )
}

fn trends(base: &ExperimentConfig) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let axes: [(SweepAxis, &[f64]); 3] = [
        (SweepAxis::AdversaryCount, &[0.0, 1.0, 3.0, 5.0]),
        (SweepAxis::PoisonRatio, &[0.1, 0.3, 0.5, 0.7]),
        (SweepAxis::BatchSize, &[10.0, 50.0, 100.0, 200.0]),
    ];
    let mut all = true;
    let mut parts = Vec::new();
    for (axis, values) in axes {
        let result = sweep(base, axis, values, SEEDS_TREND)?;
        let out = dir.path().join(axis.name());
        emit_sweep(&out, &result, Formats::default())?;
        // read the verdict back from the emitted summary
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json"))?)?;
        let v = &json["verdict"];
        let pass = v["pass"].as_bool().unwrap_or(false);
        all &= pass;
        let means: Vec<String> = result.mean_by_value.iter().map(|m| format!("{:.3}", m)).collect();
        parts.push(format!(
            "{} {} pairs {} means [{}]",
            axis.name(),
            if pass { "ok" } else { "broken" },
            v["pair_agreement"],
            means.join(" ")
        ));
    }
    Ok(verdict(all, parts.join("; ")))
}

fn ordering(runs: &TableRuns) -> Result<Verdict> {
    let mut hits = 0;
    let mut parts = Vec::new();
    for i in 0..SEEDS_TREND {
        let (clean, grey) = (&runs.clean[i], &runs.attacked[i]);
        let white = run(&with(&grey.config, |c| c.attack.mode = AttackMode::WhiteBox))?;
        let dw = clean.summary.mean_overall - white.summary.mean_overall;
        let dg = clean.summary.mean_overall - grey.summary.mean_overall;
        hits += usize::from(dw >= dg);
        parts.push(format!("{:.1}>={:.1}", 100.0 * dw, 100.0 * dg));
    }
    Ok(verdict(
        majority(hits, SEEDS_TREND),
        format!("white vs grey drop (pts) {} -> {hits}/{SEEDS_TREND}", parts.join(" ")),
    ))
}

fn stealth(runs: &TableRuns) -> Verdict {
    let mut rounds = 0;
    let mut crafted = 0;
    let mut ok = true;
    for r in &runs.attacked {
        let s = &r.summary.stealth;
        rounds += s.attacker_rounds;
        crafted += s.crafted_rounds;
        ok &= s.all_ok();
    }
    verdict(
        ok && crafted > 0,
        format!("{rounds} attacker rounds ({crafted} crafted), every constraint met: {ok}"),
    )
}

fn isolation(base: &ExperimentConfig) -> Result<Verdict> {
    let monitor = RecordingMonitor::new();
    let r = run_with_monitor(base, &monitor)?;
    let events = monitor.events().len();
    let bad = monitor.attacker_violations().len();
    let crafted = r.summary.stealth.crafted_rounds;
    Ok(verdict(
        bad == 0 && events > 0 && crafted > 0,
        format!("{events} audited reads, {bad} by attackers of honest clients"),
    ))
}

fn determinism(base: &ExperimentConfig, first: &RunResult) -> Result<Verdict> {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    emit_run(dirs[0].path(), first, Formats::default())?;
    emit_run(dirs[1].path(), &run(base)?, Formats::default())?;
    let a = std::fs::read(dirs[0].path().join("metrics.csv"))?;
    let b = std::fs::read(dirs[1].path().join("metrics.csv"))?;
    Ok(verdict(a == b, format!("metrics.csv {} bytes, identical {}", a.len(), a == b)))
}

fn report(n: usize, name: &str, v: Result<Verdict>) -> bool {
    let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    println!("criterion {n:>2} {:<4} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "gradient suite", gradients());
    ok &= report(2, "aggregation algebra", aggregation());
    ok &= report(3, "surrogate exactness", surrogate());
    ok &= report(4, "closed forms", closed_forms());
    let base = match base_config() {
        Ok(b) => b,
        Err(e) => {
            println!("cannot load the acceptance config: {e}");
            return ExitCode::FAILURE;
        }
    };
    match table_runs(&base) {
        Ok((runs, took)) => {
            ok &= report(5, "attack degrades fedavg+tent", Ok(table(&runs, took)));
            ok &= report(6, "ablation trends", trends(&base));
            ok &= report(7, "white-box at least as strong", ordering(&runs));
            ok &= report(8, "stealth audit", Ok(stealth(&runs)));
            ok &= report(9, "grey-box isolation", isolation(&base));
            ok &= report(10, "determinism", determinism(&base, &runs.attacked[0]));
        }
        Err(e) => {
            let msg = e.to_string();
            for (n, name) in [
                (5, "attack degrades fedavg+tent"),
                (6, "ablation trends"),
                (7, "white-box at least as strong"),
                (8, "stealth audit"),
                (9, "grey-box isolation"),
                (10, "determinism"),
            ] {
                ok &= report(n, name, Ok(verdict(false, format!("error: {msg}"))));
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
