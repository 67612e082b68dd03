use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::run::RunResult;
use super::sweep::SweepResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self { csv: true, json: true }
    }
}

impl std::str::FromStr for Formats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = Formats { csv: false, json: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "csv" => f.csv = true,
                "json" => f.json = true,
                other => return Err(Error::config(format!("unknown output format `{other}`"))),
            }
        }
        if !f.csv && !f.json {
            return Err(Error::config("no output format selected"));
        }
        Ok(f)
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// One row per round per client.
pub fn metrics_csv(result: &RunResult) -> Result<Vec<u8>> {
    let hash = &result.summary.config_hash;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash",
        "round",
        "client",
        "role",
        "participated",
        "accuracy",
        "source_accuracy",
        "entropy",
        "samples",
    ])
    .map_err(csv_err)?;
    for m in &result.outcome.metrics {
        for c in &m.clients {
            let role = match c.role {
                crate::data::Role::Benign => "benign",
                crate::data::Role::Adversarial => "adversarial",
            };
            w.write_record([
                hash.clone(),
                m.round.to_string(),
                c.client.to_string(),
                role.to_string(),
                c.participated.to_string(),
                c.accuracy.to_string(),
                c.source_accuracy.to_string(),
                c.entropy.to_string(),
                c.samples.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn jsonl<T: Serialize>(hash: &str, items: impl Iterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        let mut v = serde_json::to_value(item)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config_hash".into(), hash.into());
        }
        serde_json::to_writer(&mut out, &v)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct SummaryFile<'a, T: Serialize> {
    #[serde(flatten)]
    summary: &'a T,
    config: &'a super::config::ExperimentConfig,
}

/// `metrics.csv`, `summary.json`, `rounds.jsonl`, `attack.jsonl`.
pub fn emit_run(dir: &Path, result: &RunResult, formats: Formats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if formats.csv {
        write_atomic(&dir.join("metrics.csv"), &metrics_csv(result)?)?;
    }
    if formats.json {
        let hash = &result.summary.config_hash;
        let summary = SummaryFile {
            summary: &result.summary,
            config: &result.config,
        };
        write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
        write_atomic(
            &dir.join("rounds.jsonl"),
            &jsonl(hash, result.outcome.records.iter().map(|r| r.log_value()))?,
        )?;
        write_atomic(&dir.join("attack.jsonl"), &jsonl(hash, result.outcome.attack_trace.iter())?)?;
    }
    Ok(())
}

/// `sweep.csv` and `sweep.json`.
pub fn emit_sweep(dir: &Path, result: &SweepResult, formats: Formats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if formats.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_hash", "axis", "value", "seed", "mean_overall", "final_overall", "source_overall"])
            .map_err(csv_err)?;
        for r in &result.rows {
            w.write_record([
                result.config_hash.clone(),
                result.axis.name().to_string(),
                r.value.to_string(),
                r.seed.to_string(),
                r.mean_overall.to_string(),
                r.final_overall.to_string(),
                r.source_overall.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&dir.join("sweep.csv"), &bytes)?;
    }
    if formats.json {
        write_atomic(&dir.join("sweep.json"), &serde_json::to_vec_pretty(result)?)?;
    }
    Ok(())
}
