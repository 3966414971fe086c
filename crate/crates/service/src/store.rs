//! Append-only run store: one directory per run.
//!
//! `runs/<run_id>/record.json` is the machine document and `report.txt` the
//! rendered narrative. A run id is claimed by creating its directory
//! exclusively; the record is written once via rename, so readers never see
//! a partial document and nothing is ever rewritten.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use plurality_core::biaslens::{AnalysisConfig, BiasFindings};
use plurality_core::casemodel::{ClinicalCase, ModelResponse};
use plurality_core::consensus::StratifiedDifferential;
use plurality_core::gateway::{Exchange, QueryPlan};
use plurality_core::registry::RegistrySnapshot;
use plurality_core::synthesis::{EnsembleReport, SynthesizerChain};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
const RECORD_FILE: &str = "record.json";
const REPORT_FILE: &str = "report.txt";
const ID_PREFIX: &str = "run-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("run `{0}` already has a record")]
    AlreadyWritten(String),
    #[error("`{0}` is not a run id")]
    BadId(String),
    #[error("run `{run_id}`: unreadable record: {reason}")]
    Corrupt { run_id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Fan-out finished but no model returned a usable response.
    NoResponders,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    Sim,
    Live,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub fanout_wall_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub case_id: String,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    pub provider: ProviderChoice,
    /// The case as it was when the run started.
    pub case: ClinicalCase,
    pub plan_echo: QueryPlan,
    pub registry_snapshot: RegistrySnapshot,
    pub chain: SynthesizerChain,
    /// Lexicons and synonyms the analysis used, so replay needs no outside state.
    pub analysis_config: AnalysisConfig,
    /// Raw text and parsed candidates per model, sorted by model id.
    pub responses: Vec<ModelResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
    pub differential: Option<StratifiedDifferential>,
    pub bias_findings: BiasFindings,
    pub report: Option<EnsembleReport>,
    pub timings: Timings,
}

impl RunRecord {
    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.responses.iter().map(|r| r.model_id.as_str())
    }
}

/// Storage port for run records.
pub trait RunStorage: Send + Sync {
    /// Reserves a fresh, never-used run id.
    fn allocate(&self) -> Result<String, StoreError>;
    /// Writes the record for an allocated id. Fails if one already exists.
    fn put(&self, record: &RunRecord) -> Result<(), StoreError>;
    fn get(&self, run_id: &str) -> Result<RunRecord, StoreError>;
    /// Every allocated id, ascending, with whether its record is written.
    fn list(&self) -> Result<Vec<(String, bool)>, StoreError>;
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_seq(id: &str) -> Option<u64> {
    let digits = id.strip_prefix(ID_PREFIX)?;
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(RunStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        parse_seq(run_id).ok_or_else(|| StoreError::BadId(run_id.to_string()))?;
        Ok(self.dir.join(run_id))
    }

    fn ids(&self) -> Result<Vec<(u64, String)>, StoreError> {
        let mut ids: Vec<(u64, String)> = fs::read_dir(&self.dir)
            .map_err(io_err(&self.dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                parse_seq(&name).map(|n| (n, name))
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn report_text(&self, run_id: &str) -> Result<String, StoreError> {
        let path = self.run_dir(run_id)?.join(REPORT_FILE);
        match fs::read_to_string(&path) {
            Ok(t) => Ok(t),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(run_id.to_string())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl RunStorage for RunStore {
    fn allocate(&self) -> Result<String, StoreError> {
        let mut next = self.ids()?.last().map_or(1, |(n, _)| n + 1);
        loop {
            let id = format!("{ID_PREFIX}{next:06}");
            let path = self.dir.join(&id);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(id),
                // Another writer claimed it first.
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => next += 1,
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }

    fn put(&self, record: &RunRecord) -> Result<(), StoreError> {
        let dir = self.run_dir(&record.run_id)?;
        if !dir.is_dir() {
            return Err(StoreError::NotFound(record.run_id.clone()));
        }
        let final_path = dir.join(RECORD_FILE);
        if final_path.exists() {
            return Err(StoreError::AlreadyWritten(record.run_id.clone()));
        }
        if let Some(report) = &record.report {
            let path = dir.join(REPORT_FILE);
            let mut f = fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(io_err(&path))?;
            f.write_all(report.narrative.as_bytes()).map_err(io_err(&path))?;
        }
        let tmp = dir.join(format!("{RECORD_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(record).expect("run record serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        // hard_link fails if the target exists, unlike rename.
        match fs::hard_link(&tmp, &final_path) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let _ = fs::remove_file(&tmp);
                return Err(StoreError::AlreadyWritten(record.run_id.clone()));
            }
            Err(e) => return Err(io_err(&final_path)(e)),
        }
        fs::remove_file(&tmp).map_err(io_err(&tmp))
    }

    fn get(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let path = self.run_dir(run_id)?.join(RECORD_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(run_id.to_string())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            run_id: run_id.to_string(),
            reason: e.to_string(),
        })
    }

    fn list(&self) -> Result<Vec<(String, bool)>, StoreError> {
        Ok(self
            .ids()?
            .into_iter()
            .map(|(_, id)| {
                let written = self.dir.join(&id).join(RECORD_FILE).exists();
                (id, written)
            })
            .collect())
    }
}
