//! Content hashes of every input and output of a run directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Produced {
    pub sha256: String,
    pub command: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    /// Seconds since the Unix epoch of the last update; 0 with a
    /// deterministic clock.
    pub timestamp: u64,
    /// Input file name to hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to the run directory.
    pub outputs: BTreeMap<String, Produced>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
        }
        Ok(Manifest {
            tool: format!("memdec {}", env!("CARGO_PKG_VERSION")),
            timestamp: 0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Inputs are keyed by `<corpus>/<file>` so the key does not depend on
    /// where the data lives.
    pub fn add_input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, name: &str, command: &str, config_hash: &str) -> Result<()> {
        let sha256 = sha256_file(&dir.join(name))?;
        self.outputs.insert(
            name.to_string(),
            Produced {
                sha256,
                command: command.to_string(),
                config_hash: config_hash.to_string(),
            },
        );
        Ok(())
    }

    pub fn save(&mut self, dir: &Path, deterministic_clock: bool) -> Result<()> {
        self.timestamp = if deterministic_clock {
            0
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        };
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(FILE_NAME), text)?;
        Ok(())
    }
}
