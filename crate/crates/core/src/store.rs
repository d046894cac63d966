//! Run-directory persistence: JSONL artifacts, atomic JSON documents, and a
//! lockfile that keeps two processes from driving the same run.
//!
//! Layout under one run directory:
//!
//! ```text
//! <run>/config.json                  frozen copy of the run config
//! <run>/state.json                   phase state machine (resume point)
//! <run>/summary.json                 per-iteration metrics, written at the end
//! <run>/corpus/*.jsonl               tasks / personas / gold responses
//! <run>/iter<N>/conversations/*.jsonl
//! <run>/iter<N>/scores/*.jsonl
//! <run>/iter<N>/selections/*.jsonl
//! <run>/iter<N>/export/*             dataset.jsonl, manifest.json, trainer files
//! <run>/iter<N>/eval/*               log-prob items, judge records, reports
//! <run>/report/*.csv                 plot-ready tables
//! ```
//!
//! Every row is stamped with the run id, iteration, and config hash so a
//! stray file can always be traced back to the exact run that produced it.
//! Files are written completely and then renamed into place; a phase is only
//! marked done after its artifacts are durable, which is what makes resume
//! after a kill byte-identical to an uninterrupted run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("failed to serialize record for {path}: {source}")]
    Serialize {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("run directory {path} is locked by another process (pid {holder})")]
    Locked { path: String, holder: String },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), source }
}

/// Serializes each item as one JSON line. The file is written to a temp
/// sibling and renamed into place, so readers never observe a half file.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = temp_sibling(path);
    {
        let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for item in items {
            let line = serde_json::to_string(item)
                .map_err(|source| StoreError::Serialize { path: path.display().to_string(), source })?;
            writeln!(w, "{line}").map_err(|e| io_err(&tmp, e))?;
        }
        w.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Appends items to an existing JSONL file (creating it if needed). Used for
/// logs where rows arrive over time; phase artifacts prefer [`write_jsonl`].
pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|source| StoreError::Serialize { path: path.display().to_string(), source })?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a whole JSONL file, reporting the offending line on parse failures.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| StoreError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes one pretty-printed JSON document atomically (temp + rename).
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = temp_sibling(path);
    let body = serde_json::to_string_pretty(value)
        .map_err(|source| StoreError::Serialize { path: path.display().to_string(), source })?;
    fs::write(&tmp, body.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body).map_err(|source| StoreError::Parse {
        path: path.display().to_string(),
        line: 0,
        source,
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Provenance stamp attached to every persisted row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub run_id: String,
    pub iteration: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub record: T,
}

/// Path arithmetic for one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join("run.lock")
    }
    pub fn corpus_tasks(&self) -> PathBuf {
        self.root.join("corpus").join("tasks.jsonl")
    }
    pub fn corpus_personas(&self) -> PathBuf {
        self.root.join("corpus").join("personas.jsonl")
    }
    pub fn corpus_golds(&self) -> PathBuf {
        self.root.join("corpus").join("golds.jsonl")
    }
    pub fn split_plan(&self) -> PathBuf {
        self.root.join("corpus").join("splits.json")
    }
    pub fn iter_dir(&self, eta: u32) -> PathBuf {
        self.root.join(format!("iter{eta}"))
    }
    pub fn conversations(&self, eta: u32, name: &str) -> PathBuf {
        self.iter_dir(eta).join("conversations").join(format!("{name}.jsonl"))
    }
    pub fn scores(&self, eta: u32, name: &str) -> PathBuf {
        self.iter_dir(eta).join("scores").join(format!("{name}.jsonl"))
    }
    pub fn selections(&self, eta: u32, name: &str) -> PathBuf {
        self.iter_dir(eta).join("selections").join(format!("{name}.jsonl"))
    }
    pub fn export_dir(&self, eta: u32) -> PathBuf {
        self.iter_dir(eta).join("export")
    }
    pub fn dataset(&self, eta: u32) -> PathBuf {
        self.export_dir(eta).join("dataset.jsonl")
    }
    pub fn dataset_manifest(&self, eta: u32) -> PathBuf {
        self.export_dir(eta).join("manifest.json")
    }
    pub fn trainer_job(&self, eta: u32) -> PathBuf {
        self.export_dir(eta).join("trainer_job.json")
    }
    pub fn trainer_status(&self, eta: u32) -> PathBuf {
        self.export_dir(eta).join("trainer_status.json")
    }
    pub fn trained_model(&self, eta: u32) -> PathBuf {
        self.export_dir(eta).join("model.json")
    }
    pub fn eval_dir(&self, eta: u32) -> PathBuf {
        self.iter_dir(eta).join("eval")
    }
    pub fn logprob_items(&self, eta: u32) -> PathBuf {
        self.eval_dir(eta).join("logprob_items.jsonl")
    }
    pub fn logprob_summary(&self, eta: u32) -> PathBuf {
        self.eval_dir(eta).join("logprob_summary.json")
    }
    pub fn winrate_records(&self, eta: u32) -> PathBuf {
        self.eval_dir(eta).join("winrate_records.jsonl")
    }
    pub fn winrate_report(&self, eta: u32) -> PathBuf {
        self.eval_dir(eta).join("winrate_report.json")
    }
    pub fn baseline_responses(&self) -> PathBuf {
        self.eval_dir(0).join("baseline_responses.jsonl")
    }
    pub fn ablation_report(&self, eta: u32, name: &str) -> PathBuf {
        self.eval_dir(eta).join(format!("ablation_{name}.json"))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Writes stamped JSONL artifacts for one run.
pub struct RunStore {
    pub paths: RunPaths,
    pub run_id: String,
    pub config_hash: String,
}

impl RunStore {
    pub fn new(paths: RunPaths, run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        RunStore { paths, run_id: run_id.into(), config_hash: config_hash.into() }
    }

    /// Writes `items` (stamped) as a complete artifact file.
    pub fn write_stamped<T: Serialize + Clone>(
        &self,
        path: &Path,
        iteration: u32,
        items: &[T],
    ) -> Result<(), StoreError> {
        let rows: Vec<Stamped<T>> = items
            .iter()
            .map(|record| Stamped {
                run_id: self.run_id.clone(),
                iteration,
                config_hash: self.config_hash.clone(),
                record: record.clone(),
            })
            .collect();
        write_jsonl(path, &rows)
    }

    /// Reads an artifact back, dropping the stamps.
    pub fn read_stamped<T: DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>, StoreError> {
        Ok(read_jsonl::<Stamped<T>>(path)?.into_iter().map(|s| s.record).collect())
    }
}

/// Exclusive lock on a run directory, held for the life of the value.
///
/// The lock file records the holder's pid. A lock whose pid no longer exists
/// (the process was killed) is treated as stale and replaced, so `--resume`
/// works after a crash without manual cleanup.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(paths: &RunPaths) -> Result<RunLock, StoreError> {
        fs::create_dir_all(paths.root()).map_err(|e| io_err(paths.root(), e))?;
        let path = paths.lock();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut file) => {
                    write!(file, "{}", std::process::id()).map_err(|e| io_err(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(err) if err.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    if holder_is_alive(holder.trim()) {
                        return Err(StoreError::Locked {
                            path: path.display().to_string(),
                            holder: holder.trim().to_string(),
                        });
                    }
                    // Stale lock from a dead process: remove and retry.
                    let _ = fs::remove_file(&path);
                }
                Err(err) => return Err(io_err(&path, err)),
            }
        }
    }
}

fn holder_is_alive(pid: &str) -> bool {
    if pid.is_empty() {
        return false;
    }
    if pid == std::process::id().to_string() {
        return true;
    }
    #[cfg(target_os = "linux")]
    {
        Path::new("/proc").join(pid).exists()
    }
    #[cfg(not(target_os = "linux"))]
    {
        // Without a portable liveness check, err on the safe side.
        true
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
