//! The TOML file driving `seqrec train`.
//!
//! ```toml
//! dataset = "data/dataset.json"   # output of `seqrec prepare`
//! run_dir = "runs/simp"
//!
//! [model]                          # every key optional
//! backbone = "dot_product"         # or "stochastic"
//! mechanism = "simp"               # none | simp | value | add | stoc
//! d = 64
//! n = 50                           # must match `prepare --max-len`
//! heads = 1
//! layers = 2
//! dropout = 0.2
//! learning_rate = 0.001
//! l2_weight = 0.0
//! seed = 42
//! refine_scale = "sqrt_d"         # or "sqrt_n"
//!
//! [train]
//! batch_size = 128
//! num_negatives = 1
//! max_epochs = 200
//! patience = 20
//! valid_mode = "full"              # or "sampled:100"
//!
//! [eval]
//! topn = [5, 10, 20]
//! mode = "full"
//!
//! [export]
//! last = 15
//! layer = 0
//! head = 0
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqrec::{ModelConfig, RankingMode, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub export: ExportOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub topn: Vec<usize>,
    pub mode: RankingMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            topn: vec![5, 10, 20],
            mode: RankingMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub last: usize,
    pub layer: usize,
    pub head: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            last: seqrec::export::DEFAULT_LAST,
            layer: 0,
            head: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings) and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: toml::Table = text
            .parse()
            .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::user(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.run_dir = base.join(&cfg.run_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.topn.is_empty() || self.eval.topn.contains(&0) {
            return Err(CliError::user("eval.topn must be a non-empty list of positive cutoffs"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Internal(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::user(format!("--set `{spec}`: expected key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::user(format!("--set `{spec}`: empty key")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::user(format!("--set `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqrec::Mechanism;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "dataset = \"d.json\"\nrun_dir = \"r\"\n[model]\nd = 16\n");
        let cfg = RunConfig::load(&p, &["model.mechanism=simp".into(), "train.patience = 3".into()]).unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.mechanism, Mechanism::Simp);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.eval, EvalOptions::default());
        assert_eq!(cfg.dataset, dir.path().join("d.json"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "dataset = \"d.json\"\nrun_dir = \"r\"\n[model]\nhidden = 3\n");
        assert!(matches!(RunConfig::load(&p, &[]), Err(CliError::User(_))));
        let p = write(dir.path(), "dataset = \"d.json\"\nrun_dir = \"r\"\nextra = 1\n");
        assert!(RunConfig::load(&p, &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "dataset = \"d.json\"\nrun_dir = \"r\"\n[eval]\nmode = \"sampled:50\"\n");
        let cfg = RunConfig::load(&p, &[]).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
