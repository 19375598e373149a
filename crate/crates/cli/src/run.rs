use std::path::{Path, PathBuf};
use std::time::Instant;

use agropanel::{par, Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to the outputs of every run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
}

pub struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn new(argv: Vec<String>) -> Self {
        Run {
            manifest: RunManifest {
                command_line: argv,
                version: env!("CARGO_PKG_VERSION"),
                seed: None,
                threads: par::threads(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_time_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    /// Record and hash an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| io_context(e, path))?;
        self.manifest.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    /// Write the manifest to `path`.
    pub fn finish(&mut self, path: &Path) -> Result<()> {
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        write_json(path, &self.manifest)
    }

    /// Write the manifest as `<out>.manifest.json`.
    pub fn finish_beside(&mut self, out: &Path) -> Result<()> {
        let p = suffixed(out, ".manifest.json");
        self.finish(&p)
    }
}

pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_context(e, path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
