//! Per-run manifest: resolved configuration, seeds, input digests and
//! timings, enough to rerun the command bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use longer::Result;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Crate version plus a digest of the resolved configuration.
    pub artifact_version: String,
    pub config_paths: Vec<String>,
    pub resolved: BTreeMap<String, Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub output_dir: Option<String>,
    pub timings_ms: BTreeMap<String, f64>,
    #[serde(skip)]
    started: Option<Instant>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            artifact_version: String::new(),
            config_paths: Vec::new(),
            resolved: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            output_dir: None,
            timings_ms: BTreeMap::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn config_path(&mut self, p: Option<&Path>) {
        if let Some(p) = p {
            self.config_paths.push(p.display().to_string());
        }
    }

    pub fn resolve<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("serializable config");
        self.resolved.insert(key.to_string(), v);
    }

    pub fn seed(&mut self, key: &str, seed: u64) {
        self.seeds.insert(key.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings_ms.insert(phase.to_string(), t.elapsed().as_secs_f64() * 1e3);
        out
    }

    /// Writes the manifest to `path`.
    pub fn write(mut self, path: &Path) -> Result<PathBuf> {
        if let Some(t) = self.started {
            self.timings_ms.insert("total".into(), t.elapsed().as_secs_f64() * 1e3);
        }
        let resolved = serde_json::to_vec(&self.resolved)?;
        let digest = hex(&Sha256::digest(&resolved)[..6]);
        self.artifact_version = format!("{}+{}", env!("CARGO_PKG_VERSION"), digest);
        fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path.to_path_buf())
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
