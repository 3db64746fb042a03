//! Run-directory bookkeeping: human log, machine event stream, and stage
//! completion markers.
//!
//! A run directory is append-only. Stages record a fingerprint of their
//! inputs when they finish; re-running with unchanged inputs skips the
//! stage instead of rewriting its artifacts.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use geoweak::{Error, Result};

pub struct RunLog {
    run_dir: PathBuf,
    log_path: PathBuf,
    events_path: PathBuf,
}

fn now_s() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

impl RunLog {
    pub fn open(run_dir: &Path) -> Result<RunLog> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        Ok(RunLog {
            run_dir: run_dir.to_path_buf(),
            log_path: run_dir.join("run.log"),
            events_path: run_dir.join("events.jsonl"),
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// Writes one line to the human log and echoes it to stdout.
    pub fn info(&self, stage: &str, message: &str) -> Result<()> {
        let line = format!("[{:.3}] {stage}: {message}", now_s());
        println!("{stage}: {message}");
        append_line(&self.log_path, &line)
    }

    /// Appends a failure line without echoing it; the caller owns the
    /// user-facing message.
    pub fn fail(&self, message: &str) -> Result<()> {
        append_line(&self.log_path, &format!("[{:.3}] error: {message}", now_s()))
    }

    /// Records a structured event without echoing it.
    pub fn event(&self, stage: &str, kind: &str, detail: serde_json::Value) -> Result<()> {
        let record = serde_json::json!({
            "ts": now_s(),
            "stage": stage,
            "event": kind,
            "detail": detail,
        });
        append_line(&self.events_path, &record.to_string())
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }
}

/// Completion record for one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMark {
    pub fingerprint: String,
    pub completed_at: f64,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct StageLedger {
    pub stages: BTreeMap<String, StageMark>,
}

impl StageLedger {
    fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("stages.json")
    }

    pub fn load(run_dir: &Path) -> Result<StageLedger> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(StageLedger::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Decode(format!("serialize stage ledger: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn mark(&self, stage: &str) -> Option<&StageMark> {
        self.stages.get(stage)
    }

    /// The recorded fingerprint a downstream stage chains from. Missing
    /// marks mean the pipeline is being run out of order.
    pub fn require(&self, stage: &str) -> Result<&StageMark> {
        self.stages.get(stage).ok_or_else(|| {
            Error::InvalidInput(format!("stage '{stage}' has not run in this run directory yet"))
        })
    }
}

/// Builds a stage input fingerprint from ordered parts: config slices,
/// upstream fingerprints, input file digests.
pub struct Fingerprint {
    hasher: Sha256,
}

impl Fingerprint {
    pub fn new(stage: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update([0]);
        Fingerprint { hasher }
    }

    pub fn text(mut self, part: &str) -> Self {
        self.hasher.update(part.as_bytes());
        self.hasher.update([0]);
        self
    }

    /// Hashes a serializable config slice via its JSON form.
    pub fn config<T: Serialize>(self, part: &T) -> Result<Self> {
        let json = serde_json::to_string(part)
            .map_err(|e| Error::Decode(format!("fingerprint serialize: {e}")))?;
        Ok(self.text(&json))
    }

    /// Hashes an input file's bytes.
    pub fn file(mut self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.hasher.update(&bytes);
        self.hasher.update([0]);
        Ok(self)
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

/// Runs `body` unless the stage already completed with the same inputs and
/// its outputs still exist. Returns true when the stage was skipped.
pub fn run_stage<F>(
    log: &RunLog,
    stage: &str,
    fingerprint: String,
    body: F,
) -> Result<bool>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    let mut ledger = StageLedger::load(log.run_dir())?;
    if let Some(mark) = ledger.mark(stage) {
        if mark.fingerprint == fingerprint && mark.outputs.iter().all(|p| p.exists()) {
            log.info(stage, "up to date, skipping")?;
            log.event(stage, "skipped", serde_json::json!({ "fingerprint": fingerprint }))?;
            return Ok(true);
        }
        log.info(stage, "inputs changed, re-running")?;
    }
    log.event(stage, "started", serde_json::json!({ "fingerprint": fingerprint }))?;
    let outputs = body()?;
    ledger.stages.insert(
        stage.to_string(),
        StageMark { fingerprint, completed_at: now_s(), outputs },
    );
    ledger.save(log.run_dir())?;
    log.event(stage, "completed", serde_json::Value::Null)?;
    Ok(false)
}
