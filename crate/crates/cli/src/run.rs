//! Run directory bookkeeping: produced files and the JSONL training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hdrlift_core::diffusion::StepStats;
use hdrlift_core::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub kind: String,
    pub bytes: u64,
}

/// Directory every command writes into; `artifacts.json` lists what was
/// produced.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<(PathBuf, String)>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Notes a produced file; paths under the run directory are stored
    /// relative to it.
    pub fn record(&mut self, path: &Path, kind: &str) {
        if !self.artifacts.iter().any(|(p, _)| p == path) {
            self.artifacts.push((path.to_path_buf(), kind.to_string()));
        }
    }

    pub fn write_text(&mut self, rel: &str, text: &str, kind: &str) -> Result<PathBuf> {
        let p = self.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.record(&p, kind);
        Ok(p)
    }

    pub fn finish(&mut self) -> Result<PathBuf> {
        let list: Vec<Artifact> = self
            .artifacts
            .iter()
            .map(|(p, kind)| Artifact {
                path: p.strip_prefix(&self.root).unwrap_or(p).display().to_string(),
                kind: kind.clone(),
                bytes: std::fs::metadata(p).map(|m| m.len()).unwrap_or(0),
            })
            .collect();
        let p = self.join("artifacts.json");
        let text = serde_json::to_string_pretty(&list).expect("artifact list serialises");
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Append-only JSONL log of training steps.
pub struct TrainLog {
    path: PathBuf,
    file: File,
}

impl TrainLog {
    /// Opens the log, keeping only rows before `next_step` so a resumed run
    /// never duplicates a step.
    pub fn open(path: &Path, next_step: u64) -> Result<Self> {
        let kept = if path.exists() { Self::read(path)? } else { Vec::new() };
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        for row in kept.iter().filter(|r| r.step < next_step) {
            writeln!(file, "{}", serde_json::to_string(row).expect("row serialises")).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, row: &StepStats) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(row).expect("row serialises")).map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepStats>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        Ok(rows)
    }
}
