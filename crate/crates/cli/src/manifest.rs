//! Run manifests: per stage, the hashed inputs and outputs, parameters,
//! numeric results and wall time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stereoforge::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// relative to the run directory when inside it
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub parameters: BTreeMap<String, String>,
    pub results: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    /// normalised configuration text the run used
    pub config: String,
    pub stages: Vec<StageRecord>,
    /// name of the stage that aborted the run, if any
    pub failed_stage: Option<String>,
    pub summary: BTreeMap<String, f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(seed: u64, config: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            stages: Vec::new(),
            failed_stage: None,
            summary: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.stage.as_str()).collect()
    }

    /// Digest over every stage's name and file hashes: equal digests mean
    /// the runs consumed and produced byte-identical artifacts.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stages {
            h.update(s.stage.as_bytes());
            for f in s.inputs.iter().chain(&s.outputs) {
                h.update(f.path.as_bytes());
                h.update(f.sha256.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Accumulates one stage's record. Inputs are hashed when added, outputs
/// when the stage finishes.
pub struct Recorder {
    root: PathBuf,
    record: StageRecord,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn new(stage: &str, root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            record: StageRecord {
                stage: stage.to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                parameters: BTreeMap::new(),
                results: BTreeMap::new(),
                wall_time_s: 0.0,
            },
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    pub fn input(&mut self, p: &Path) -> Result<(), Error> {
        let rec = FileRecord { path: self.display(p), sha256: sha256_file(p)? };
        self.record.inputs.push(rec);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn param(&mut self, k: &str, v: impl ToString) {
        self.record.parameters.insert(k.to_string(), v.to_string());
    }

    pub fn result(&mut self, k: &str, v: f64) {
        self.record.results.insert(k.to_string(), v);
    }

    pub fn finish(mut self) -> Result<StageRecord, Error> {
        for p in std::mem::take(&mut self.outputs) {
            let rec = FileRecord { path: self.display(&p), sha256: sha256_file(&p)? };
            self.record.outputs.push(rec);
        }
        self.record.wall_time_s = self.start.elapsed().as_secs_f64();
        Ok(self.record)
    }
}

impl StageRecord {
    /// Folds `other` (a sub-step of the same stage) into this record.
    pub fn absorb(&mut self, other: StageRecord) {
        for f in other.inputs {
            let produced_here = self.outputs.iter().any(|o| o.path == f.path);
            if !produced_here && !self.inputs.contains(&f) {
                self.inputs.push(f);
            }
        }
        self.outputs.extend(other.outputs);
        for (k, v) in other.parameters {
            self.parameters.insert(format!("{}.{k}", other.stage), v);
        }
        for (k, v) in other.results {
            self.results.insert(format!("{}.{k}", other.stage), v);
        }
        self.wall_time_s += other.wall_time_s;
    }
}
