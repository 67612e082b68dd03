use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::federation::ServerConfig;
use crate::tta::TtaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10c,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dims: usize,
    /// Per-dimension standard deviation of the synthetic clusters.
    pub spread: f64,
    pub samples_per_client: usize,
    /// Per-client domains as `kind:severity` (synthetic) or
    /// `file-stem:severity` (CIFAR-10-C). Cycles when shorter than the
    /// client count; defaults to every synthetic kind at severity 5.
    pub domains: Option<Vec<String>>,
    /// Directory of CIFAR-10-C arrays.
    pub path: Option<PathBuf>,
    /// Source checkpoint, required for CIFAR-10-C.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            classes: 4,
            dims: 16,
            spread: 0.06,
            samples_per_client: 800,
            domains: None,
            path: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![24] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 500,
            epochs: 60,
            lr: 0.1,
            batch: 32,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub adversaries: usize,
    pub batch_size: usize,
    pub batches_per_round: usize,
    pub continual: bool,
    pub parallel: bool,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tta: TtaConfig,
    /// Adaptation the attackers run on their poisoned batches; the benign
    /// method when unset.
    pub attacker_tta: Option<TtaConfig>,
    pub server: ServerConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 10,
            adversaries: 5,
            batch_size: 100,
            batches_per_round: 1,
            continual: false,
            parallel: true,
            out: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tta: TtaConfig {
                method: crate::tta::TtaMethod::Tent,
                ..TtaConfig::default()
            },
            attacker_tta: None,
            server: ServerConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key.path=value` overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if !doc.contains_key("seed") {
            return Err(Error::config("config must set `seed`"));
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn attacker_tta(&self) -> &TtaConfig {
        self.attacker_tta.as_ref().unwrap_or(&self.tta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("at least one client is required"));
        }
        if self.adversaries > self.clients {
            return Err(Error::config(format!(
                "{} adversaries exceed {} clients",
                self.adversaries, self.clients
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.batches_per_round == 0 {
            return Err(Error::config("batches per round must be at least 1"));
        }
        if self.dataset.classes < 2 || self.dataset.dims < 2 {
            return Err(Error::config("dataset needs at least 2 classes and 2 dims"));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model needs nonzero hidden widths"));
        }
        let p = &self.pretrain;
        if p.samples_per_class < 2 || p.epochs == 0 || p.lr.is_nan() || p.lr <= 0.0 || p.batch < 2 {
            return Err(Error::config("invalid pretraining settings"));
        }
        self.tta.validate()?;
        self.attacker_tta().validate()?;
        self.server.validate()?;
        if self.adversaries > 0 {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}` descends into a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse `name:severity`.
pub fn parse_domain(s: &str) -> Result<(String, u8)> {
    let (name, sev) = s
        .split_once(':')
        .ok_or_else(|| Error::config(format!("domain `{s}` is not name:severity")))?;
    let sev: u8 = sev
        .parse()
        .map_err(|_| Error::config(format!("domain `{s}` has a bad severity")))?;
    if !(1..=5).contains(&sev) {
        return Err(Error::config(format!("domain `{s}` severity outside 1..5")));
    }
    Ok((name.to_string(), sev))
}
