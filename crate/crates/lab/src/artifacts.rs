//! Artifact directory layout and the run manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sgd_valley::RunRecord;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
    /// Finished, but some runs aborted; their partial records are kept and listed.
    Partial,
    /// The experiment stopped early; whatever was written is listed.
    Aborted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub kind: String,
    pub config: Value,
    /// SHA-256 of the echoed config.
    pub config_hash: String,
    pub master_seed: u64,
    /// Seeds actually used, keyed by purpose.
    pub seeds: serde_json::Map<String, Value>,
    pub workers: usize,
    pub wall_time_secs: f64,
    pub status: Status,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub aborted_runs: Vec<(u64, String)>,
    /// Paths relative to the artifact directory.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Tracks the files an experiment writes under its directory.
pub struct Artifacts {
    pub dir: PathBuf,
    pub written: Vec<String>,
    pub seeds: serde_json::Map<String, Value>,
    pub aborted_runs: Vec<(u64, String)>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new(), seeds: Default::default(), aborted_runs: Vec::new() })
    }

    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_string());
        Ok(p)
    }

    pub fn file(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel)?;
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    pub fn json<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(rel)?, text)?;
        Ok(())
    }

    pub fn csv<S: Serialize>(&mut self, rel: &str, rows: &[S]) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.file(rel)?);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn seed(&mut self, key: &str, value: impl Serialize) {
        self.seeds.insert(key.to_string(), serde_json::to_value(value).expect("seed serializes"));
    }

    /// One CSV per run as `<group>/seed_<seed>.csv`; aborted runs are recorded.
    pub fn runs(&mut self, group: &str, records: &[RunRecord<f64>], stride: usize) -> Result<()> {
        for r in records {
            r.write_csv_every(self.file(&format!("{group}/seed_{}.csv", r.seed))?, stride)?;
            if !r.valid {
                self.aborted_runs.push((r.seed, r.abort_reason.clone().unwrap_or_default()));
            }
        }
        Ok(())
    }
}
