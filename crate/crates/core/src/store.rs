//! File-backed result store.
//!
//! Layout: `{root}/runs/{run id}.json`, `{root}/index.json`,
//! `{root}/audit/{run id}.jsonl`, reports at `{root}/{run id}.report.{json|md}`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::orchestrator::{ExperimentResult, RunStatus};
use crate::parse::canonical_json;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("run id `{0}` already exists")]
    DuplicateRunId(String),
    #[error("no run `{0}` in store")]
    UnknownRun(String),
    #[error("store is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("corrupt store document {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub experiment_id: String,
    pub started_at_us: u64,
    pub status: RunStatus,
    pub driver: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
struct Index {
    encryption_at_rest: bool,
    runs: Vec<RunSummary>,
}

/// Conjunctive filter; absent fields match everything.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunFilter {
    pub experiment_id: Option<String>,
    pub status: Option<RunStatus>,
    /// Half-open `[from, to)` over `started_at_us`.
    pub from_us: Option<u64>,
    pub to_us: Option<u64>,
    /// Every listed tag must be present.
    pub tags: Vec<String>,
}

impl RunFilter {
    pub fn matches(&self, r: &RunSummary) -> bool {
        self.experiment_id.as_ref().is_none_or(|e| *e == r.experiment_id)
            && self.status.is_none_or(|s| s == r.status)
            && self.from_us.is_none_or(|t| r.started_at_us >= t)
            && self.to_us.is_none_or(|t| r.started_at_us < t)
            && self.tags.iter().all(|t| r.tags.contains(t))
    }
}

#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

/// Exclusive writer lock, released on drop.
struct WriteLock(PathBuf);

impl WriteLock {
    fn take(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WriteLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Tags recorded in the index: driver name plus fault kinds.
pub fn tags_for(result: &ExperimentResult) -> Vec<String> {
    let mut tags = vec![result.driver.clone()];
    tags.extend(result.experiment.fault_kinds().iter().map(|k| k.as_str().to_string()));
    tags.sort();
    tags.dedup();
    tags
}

/// `{experiment id}-{started_at}-{first 8 hex of the document hash}`.
pub fn run_id_for(result: &ExperimentResult) -> String {
    let digest = Sha256::digest(canonical_json(result));
    format!(
        "{}-{}-{}",
        result.experiment_id,
        result.started_at_us,
        &hex::encode(digest)[..8]
    )
}

impl ResultStore {
    /// Open or initialise a store at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        fs::create_dir_all(root.join("audit"))?;
        let store = ResultStore { root };
        if !store.index_path().exists() {
            let _lock = WriteLock::take(&store.root)?;
            store.write_index(&Index::default())?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn run_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.json"))
    }

    pub fn audit_path(&self, run_id: &str) -> PathBuf {
        self.root.join("audit").join(format!("{run_id}.jsonl"))
    }

    pub fn report_path(&self, run_id: &str, ext: &str) -> PathBuf {
        self.root.join(format!("{run_id}.report.{ext}"))
    }

    fn read_index(&self) -> Result<Index, StoreError> {
        let path = self.index_path();
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    fn write_index(&self, index: &Index) -> Result<(), StoreError> {
        Ok(write_atomic(&self.index_path(), &canonical_json(index))?)
    }

    pub fn encryption_at_rest(&self) -> Result<bool, StoreError> {
        Ok(self.read_index()?.encryption_at_rest)
    }

    /// Record the deployment's encryption-at-rest capability.
    pub fn set_encryption_at_rest(&self, on: bool) -> Result<(), StoreError> {
        let _lock = WriteLock::take(&self.root)?;
        let mut index = self.read_index()?;
        index.encryption_at_rest = on;
        self.write_index(&index)
    }

    /// Persist a result (and its audit chain bytes) and return the run id.
    pub fn save(&self, result: &ExperimentResult, audit: Option<&[u8]>) -> Result<String, StoreError> {
        let _lock = WriteLock::take(&self.root)?;
        let run_id = run_id_for(result);
        let mut index = self.read_index()?;
        let path = self.run_path(&run_id);
        if index.runs.iter().any(|r| r.run_id == run_id) || path.exists() {
            return Err(StoreError::DuplicateRunId(run_id));
        }
        write_atomic(&path, &canonical_json(result))?;
        if let Some(chain) = audit {
            write_atomic(&self.audit_path(&run_id), chain)?;
        }
        index.runs.push(RunSummary {
            run_id: run_id.clone(),
            experiment_id: result.experiment_id.clone(),
            started_at_us: result.started_at_us,
            status: result.status,
            driver: result.driver.clone(),
            tags: tags_for(result),
        });
        self.write_index(&index)?;
        Ok(run_id)
    }

    pub fn load(&self, run_id: &str) -> Result<ExperimentResult, StoreError> {
        let path = self.run_path(run_id);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownRun(run_id.into()),
            _ => e.into(),
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    pub fn load_audit(&self, run_id: &str) -> Result<Vec<u8>, StoreError> {
        fs::read(self.audit_path(run_id)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownRun(run_id.into()),
            _ => e.into(),
        })
    }

    /// Matching runs, newest first, run id ascending among equal start times.
    pub fn query(&self, filter: &RunFilter) -> Result<Vec<RunSummary>, StoreError> {
        let mut runs: Vec<RunSummary> = self
            .read_index()?
            .runs
            .into_iter()
            .filter(|r| filter.matches(r))
            .collect();
        runs.sort_by(|a, b| {
            b.started_at_us
                .cmp(&a.started_at_us)
                .then_with(|| a.run_id.cmp(&b.run_id))
        });
        Ok(runs)
    }

    pub fn write_report(&self, run_id: &str, ext: &str, body: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.report_path(run_id, ext);
        write_atomic(&path, body)?;
        Ok(path)
    }
}
