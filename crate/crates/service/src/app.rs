//! Application core shared by the HTTP API and the CLI.
//!
//! Data directory layout: `models/` (descriptor documents), `cases/` (case
//! documents) and `runs/` (the run store). A fresh directory is seeded with
//! the bundled simulated population and the fixture cases.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use plurality_core::assets;
use plurality_core::biaslens::AnalysisConfig;
use plurality_core::casemodel::{CaseBundle, CaseError, ClinicalCase};
use plurality_core::consensus::ConsensusError;
use plurality_core::gateway::{GatewayError, LiveConfig, LiveProvider, ProviderPort, QueryPlan};
use plurality_core::pipeline::{analyze_responses, restratify, run_pipeline, Analysis, PipelineError, RunRequest};
use plurality_core::registry::{ModelDescriptor, ModelFilter, Registry, RegistryError, RegistrySnapshot};
use plurality_core::simharness::SimulatedProvider;
use plurality_core::synthesis::{
    ChainEntry, ChainError, LiveSynthesizer, NarrativePort, NoSynthesizer, RunIdentity, SynthesizerChain,
};

use crate::metrics::{batch_metrics, BatchMetrics};
use crate::store::{ProviderChoice, RunRecord, RunStatus, RunStorage, RunStore, StoreError, Timings, RECORD_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("case `{0}` not found")]
    CaseNotFound(String),
    #[error("run `{0}` not found")]
    RunNotFound(String),
    #[error("no enabled model matches the filter")]
    NoModelsSelected,
    #[error("no model returned a usable response")]
    NoResponders,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error(transparent)]
    Store(StoreError),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) | StoreError::BadId(id) => AppError::RunNotFound(id),
            other => AppError::Store(other),
        }
    }
}

impl From<CaseError> for AppError {
    fn from(e: CaseError) -> Self {
        match e {
            CaseError::DuplicateId(id) => AppError::Conflict(format!("case `{id}` already exists")),
            CaseError::Io { .. } => AppError::Internal(e.to_string()),
            other => AppError::Invalid(other.to_string()),
        }
    }
}

impl From<RegistryError> for AppError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::DuplicateId(id) => AppError::Conflict(format!("model `{id}` already registered")),
            RegistryError::UnknownModel(id) => AppError::Invalid(format!("model `{id}` is not registered")),
            RegistryError::Io { .. } => AppError::Internal(e.to_string()),
            other => AppError::Invalid(other.to_string()),
        }
    }
}

impl From<ChainError> for AppError {
    fn from(e: ChainError) -> Self {
        AppError::Invalid(e.to_string())
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(GatewayError::PlanInvalid(m)) => AppError::Invalid(m),
            PipelineError::SubsetNotInRun(m) => AppError::Conflict(format!("model `{m}` is not part of this run")),
            PipelineError::Consensus(ConsensusError::NoResponders) => AppError::NoResponders,
            PipelineError::Consensus(c) => AppError::Internal(c.to_string()),
        }
    }
}

/// What a caller asks for when starting a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub case_id: String,
    #[serde(default)]
    pub filter: ModelFilter,
    /// Synthesizer chain; defaults to the template alone.
    #[serde(default)]
    pub chain: Option<Vec<ChainEntry>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provider: Option<ProviderChoice>,
    #[serde(default)]
    pub per_model_timeout_ms: Option<u64>,
    #[serde(default)]
    pub max_parallel: Option<usize>,
}

/// A validated run with its id reserved in the store.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub run_id: String,
    case: ClinicalCase,
    registry: RegistrySnapshot,
    plan: QueryPlan,
    chain: SynthesizerChain,
    provider: ProviderChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Running,
    Failed { error: String },
}

/// Result of replaying a stored run from its own responses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayCheck {
    pub run_id: String,
    pub differential_matches: bool,
    pub findings_match: bool,
    pub template_matches: bool,
}

impl ReplayCheck {
    pub fn ok(&self) -> bool {
        self.differential_matches && self.findings_match && self.template_matches
    }
}

pub struct App {
    dir: PathBuf,
    registry: Registry,
    cases: CaseBundle,
    store: RunStore,
    config: AnalysisConfig,
    sim: Arc<SimulatedProvider>,
    live: LiveConfig,
    jobs: Mutex<BTreeMap<String, JobState>>,
}

impl std::fmt::Debug for App {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("App").field("dir", &self.dir).finish_non_exhaustive()
    }
}

pub const DEFAULT_SEED: u64 = 0;

/// `(run_id, record, job state)`; exactly one of the last two is set.
pub type RunListing = (String, Option<RunRecord>, Option<JobState>);

impl App {
    /// Opens (and on first use seeds) a data directory.
    pub fn open(dir: impl AsRef<Path>, live: LiveConfig) -> Result<Self, AppError> {
        let dir = dir.as_ref().to_path_buf();
        let models_dir = dir.join("models");
        let cases_dir = dir.join("cases");
        let fresh_models = !models_dir.exists();
        let fresh_cases = !cases_dir.exists();
        let registry = Registry::open(&models_dir)?;
        if fresh_models {
            for (descriptor, _) in assets::population() {
                registry.register_model(descriptor)?;
            }
        }
        let cases = CaseBundle::new(&cases_dir);
        if fresh_cases {
            std::fs::create_dir_all(&cases_dir).map_err(|e| AppError::Internal(e.to_string()))?;
            for case in assets::fixture_cases() {
                cases.add(&case)?;
            }
        }
        let store = RunStore::open(dir.join("runs"))?;
        Ok(App {
            dir,
            registry,
            cases,
            store,
            config: assets::analysis_config(),
            sim: Arc::new(assets::simulated_provider()),
            live,
            jobs: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn models(&self) -> Vec<ModelDescriptor> {
        self.registry.snapshot().iter().cloned().collect()
    }

    pub fn add_model(&self, descriptor: ModelDescriptor) -> Result<String, AppError> {
        Ok(self.registry.register_model(descriptor)?)
    }

    pub fn cases(&self) -> Result<Vec<ClinicalCase>, AppError> {
        Ok(self.cases.load()?)
    }

    pub fn case(&self, case_id: &str) -> Result<ClinicalCase, AppError> {
        self.cases.get(case_id)?.ok_or_else(|| AppError::CaseNotFound(case_id.to_string()))
    }

    pub fn add_case(&self, case: &ClinicalCase) -> Result<(), AppError> {
        Ok(self.cases.add(case)?)
    }

    /// Validates a run request and reserves its id.
    pub fn prepare(&self, spec: &RunSpec) -> Result<PreparedRun, AppError> {
        let case = self.case(&spec.case_id)?;
        let chain = match &spec.chain {
            Some(entries) => SynthesizerChain::new(entries.clone())?,
            None => SynthesizerChain::template_only(),
        };
        let snapshot = self.registry.snapshot();
        let selected = snapshot.select(&spec.filter);
        if selected.is_empty() {
            return Err(AppError::NoModelsSelected);
        }
        let provider = spec.provider.unwrap_or(ProviderChoice::Sim);
        if provider == ProviderChoice::Live {
            let registered = |r: &str| snapshot.contains(r);
            if let Some(e) = chain.entries().iter().find(|e| e.synthesizer_ref != "template" && !registered(&e.synthesizer_ref)) {
                return Err(AppError::Invalid(format!("synthesizer `{}` is not registered", e.synthesizer_ref)));
            }
        }
        let registry = RegistrySnapshot::from_models(selected);
        let mut plan = QueryPlan::new(&case.case_id, registry.iter().map(|d| d.model_id.clone()), spec.seed.unwrap_or(DEFAULT_SEED));
        if let Some(t) = spec.per_model_timeout_ms {
            plan.per_model_timeout_ms = t;
        }
        if let Some(p) = spec.max_parallel {
            plan.max_parallel = p;
        }
        plan.validate().map_err(|e| AppError::Invalid(e.to_string()))?;
        let run_id = self.store.allocate()?;
        Ok(PreparedRun {
            run_id,
            case,
            registry,
            plan,
            chain,
            provider,
        })
    }

    /// Runs a prepared plan to completion and stores the record.
    ///
    /// A run where nobody responded is still stored; the caller gets
    /// [`AppError::NoResponders`] alongside the persisted id.
    pub async fn execute(&self, prepared: PreparedRun) -> Result<RunRecord, AppError> {
        let started = Instant::now();
        let created_at = Utc::now();
        let identity = RunIdentity {
            run_id: prepared.run_id.clone(),
            generated_at: created_at.to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let (provider, narrator): (Arc<dyn ProviderPort>, Box<dyn NarrativePort>) = match prepared.provider {
            ProviderChoice::Sim => (self.sim.clone(), Box::new(NoSynthesizer)),
            ProviderChoice::Live => {
                let live = LiveProvider::new(self.live.clone());
                let synth = LiveSynthesizer {
                    provider: LiveProvider::new(self.live.clone()),
                    registry: self.registry.snapshot().as_ref().clone(),
                };
                (Arc::new(live), Box::new(synth))
            }
        };
        let request = RunRequest {
            case: &prepared.case,
            registry: &prepared.registry,
            plan: &prepared.plan,
            chain: &prepared.chain,
            config: &self.config,
            identity,
        };
        let artifacts = run_pipeline(request, provider, narrator.as_ref()).await?;
        let status = if artifacts.no_responders() {
            RunStatus::NoResponders
        } else {
            RunStatus::Completed
        };
        let record = RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            run_id: prepared.run_id.clone(),
            case_id: prepared.case.case_id.clone(),
            created_at,
            status,
            provider: prepared.provider,
            case: prepared.case,
            plan_echo: artifacts.fanout.plan_echo.clone(),
            registry_snapshot: prepared.registry,
            chain: prepared.chain,
            analysis_config: self.config.clone(),
            responses: artifacts.fanout.responses,
            exchanges: artifacts.fanout.exchanges,
            differential: artifacts.differential,
            bias_findings: artifacts.findings,
            report: artifacts.report,
            timings: Timings {
                fanout_wall_ms: artifacts.fanout.wall_time_ms,
                total_ms: started.elapsed().as_millis() as u64,
            },
        };
        self.store.put(&record)?;
        Ok(record)
    }

    /// Prepare and execute in one step. Returns the record even for runs
    /// without responders; inspect `status`.
    pub async fn run_case(&self, spec: &RunSpec) -> Result<RunRecord, AppError> {
        let prepared = self.prepare(spec)?;
        self.execute(prepared).await
    }

    /// Starts a run in the background and returns its id immediately.
    pub fn submit(self: &Arc<Self>, spec: &RunSpec) -> Result<String, AppError> {
        let prepared = self.prepare(spec)?;
        let run_id = prepared.run_id.clone();
        self.jobs.lock().expect("jobs lock").insert(run_id.clone(), JobState::Running);
        let app = Arc::clone(self);
        let id = run_id.clone();
        tokio::spawn(async move {
            let outcome = app.execute(prepared).await;
            let mut jobs = app.jobs.lock().expect("jobs lock");
            match outcome {
                Ok(_) => {
                    jobs.remove(&id);
                }
                Err(e) => {
                    jobs.insert(id, JobState::Failed { error: e.to_string() });
                }
            }
        });
        Ok(run_id)
    }

    /// In-flight or failed job state for an id with no stored record.
    pub fn job(&self, run_id: &str) -> Option<JobState> {
        self.jobs.lock().expect("jobs lock").get(run_id).cloned()
    }

    pub fn run(&self, run_id: &str) -> Result<RunRecord, AppError> {
        Ok(self.store.get(run_id)?)
    }

    /// Every allocated run id with its job state when the record is missing.
    pub fn runs(&self) -> Result<Vec<RunListing>, AppError> {
        let mut out = Vec::new();
        for (id, written) in self.store.list()? {
            if written {
                let record = self.store.get(&id)?;
                out.push((id, Some(record), None));
            } else {
                let state = self.job(&id).unwrap_or(JobState::Failed {
                    error: "run did not complete".into(),
                });
                out.push((id, None, Some(state)));
            }
        }
        Ok(out)
    }

    pub fn metrics(&self, run_ids: &[String]) -> Result<BatchMetrics, AppError> {
        if run_ids.is_empty() {
            return Err(AppError::Invalid("at least one run id is required".into()));
        }
        let mut seen = BTreeSet::new();
        let mut records = Vec::with_capacity(run_ids.len());
        for id in run_ids {
            if !seen.insert(id) {
                return Err(AppError::Invalid(format!("run `{id}` listed twice")));
            }
            records.push(self.run(id)?);
        }
        batch_metrics(&records).map_err(|e| AppError::Invalid(e.to_string()))
    }

    /// What-if view over a stored run; nothing is written.
    pub fn restratify(&self, run_id: &str, model_ids: &BTreeSet<String>) -> Result<Analysis, AppError> {
        let record = self.run(run_id)?;
        Ok(restratify(
            &record.case,
            &record.responses,
            &record.registry_snapshot,
            &record.analysis_config,
            model_ids,
        )?)
    }

    pub fn replay(&self, run_id: &str) -> Result<ReplayCheck, AppError> {
        let record = self.run(run_id)?;
        Ok(replay_record(&record))
    }
}

/// Recomputes a record's analysis from its stored responses and compares.
pub fn replay_record(record: &RunRecord) -> ReplayCheck {
    let again = analyze_responses(&record.case, &record.responses, &record.registry_snapshot, &record.analysis_config);
    let (differential_matches, findings_match, template_matches) = match (&again, &record.differential) {
        (Ok(a), Some(d)) => (
            a.differential == *d,
            a.findings == record.bias_findings,
            record.report.as_ref().is_some_and(|r| r.template_narrative == a.template_narrative),
        ),
        (Err(ConsensusError::NoResponders), None) => {
            let findings = plurality_core::biaslens::analyze(
                &record.case,
                &record.responses,
                &record.registry_snapshot,
                &record.analysis_config,
            );
            (true, findings == record.bias_findings, record.report.is_none())
        }
        _ => (false, false, false),
    };
    ReplayCheck {
        run_id: record.run_id.clone(),
        differential_matches,
        findings_match,
        template_matches,
    }
}
