use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graphflow::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;

/// Record of one invocation: what ran, with which settings, on which files.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// SHA-256 of every input and output file, keyed by path.
    pub digests: BTreeMap<String, String>,
    pub summary: serde_json::Value,
    pub wall_time_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            digests: BTreeMap::new(),
            summary: serde_json::Value::Null,
            wall_time_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn config(&mut self, entries: impl IntoIterator<Item = (String, String)>) {
        self.config.extend(entries);
    }

    /// Digests the recorded files, prints the manifest as one JSON line on
    /// stdout and writes it to `extra` when given.
    pub fn finish(mut self, extra: Option<&PathBuf>) -> CliResult<()> {
        for path in self.inputs.values().chain(self.outputs.values()) {
            let p = Path::new(path);
            if p.is_file() {
                self.digests.insert(path.clone(), file_digest(p)?);
            }
        }
        self.wall_time_secs = self.started.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0);
        let line = serde_json::to_string(&self).map_err(Error::from)?;
        println!("{line}");
        if let Some(path) = extra {
            fs::write(path, format!("{line}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
