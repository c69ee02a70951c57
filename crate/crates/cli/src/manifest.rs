//! Run manifests: everything needed to repeat a run, as `key = value` lines.
//!
//! Wall-clock timings live in a separate `timings.txt` so that repeated runs
//! produce byte-identical manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use xattn_core::pipeline::TransferConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMINGS_FILE: &str = "timings.txt";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn config(&mut self, config: &TransferConfig) {
        for (k, v) in config.entries() {
            self.set(format!("config.{k}"), v);
        }
    }

    /// Records an input path and its content hash.
    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.set(format!("input.{role}"), path.display());
        self.set(format!("input.{role}.sha256"), sha256_file(path)?);
        Ok(())
    }

    /// Records an artifact (path relative to the run directory) and its hash.
    pub fn artifact(&mut self, dir: &Path, name: &str) -> std::io::Result<()> {
        self.set(format!("artifact.{name}.sha256"), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())
    }
}

/// Named stage durations.
#[derive(Debug)]
pub struct Timings {
    start: Instant,
    last: Instant,
    stages: Vec<(String, Duration)>,
}

impl Timings {
    pub fn start() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    pub fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push((stage.to_string(), now - self.last));
        self.last = now;
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut s = String::new();
        for (k, d) in &self.stages {
            let _ = writeln!(s, "{k} = {:.6}", d.as_secs_f64());
        }
        let _ = writeln!(s, "total = {:.6}", self.start.elapsed().as_secs_f64());
        fs::write(dir.join(TIMINGS_FILE), s)
    }
}
