//! On-disk layouts shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqrec::checkpoint::Checkpoint;
use seqrec::data::SplitDataset;
use seqrec::train::TrainState;

use crate::error::{CliError, CliResult};

pub const DATASET_FORMAT: &str = "seqrec-dataset";

/// A prepared, split dataset. `items[i]` is the raw id of item `i + 1`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format: String,
    pub items: Vec<String>,
    pub split: SplitDataset,
}

impl DatasetFile {
    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| CliError::user(format!("cannot read dataset {}: {e}", path.display())))?;
        let ds: DatasetFile = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::user(format!("{}: not a prepared dataset: {e}", path.display())))?;
        if ds.format != DATASET_FORMAT {
            return Err(CliError::user(format!("{}: unexpected format `{}`", path.display(), ds.format)));
        }
        Ok((ds, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` next to `path` and renames over it, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

/// Identity of a run, written once when it starts.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub seqrec_version: String,
}

/// Resumable trainer snapshot: optimizer/early-stopping state plus the
/// parameters at the end of the last completed epoch.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub state: TrainState,
    pub current: Checkpoint,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn info(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn trainer(&self) -> PathBuf {
        self.root.join("trainer.json")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
