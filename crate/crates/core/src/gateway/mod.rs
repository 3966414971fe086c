//! Stage-one fan-out: the same case goes to every selected model.
//!
//! Each model gets its own timeout and retry budget; a bounded number of
//! provider calls run at once. Per-model failures come back as response
//! statuses, never as errors, and responses are always sorted by model id.
//!
//! Providers that report a simulated latency are run on a virtual clock:
//! latencies, timeouts and the overall wall time are derived from the
//! reported values instead of being measured, so the result is a pure
//! function of the plan and the case.

mod live;
mod prompt;

pub use live::{LiveConfig, LiveProvider};
pub use prompt::{render_case_prompt, SYSTEM_PROMPT};

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::casemodel::{parse_response, ClinicalCase, ModelResponse, ResponseStatus};
use crate::registry::{ModelDescriptor, RegistrySnapshot};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid query plan: {0}")]
    PlanInvalid(String),
}

/// Classified transport failure from one provider call.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TransportFailure {
    #[error("timed out")]
    Timeout,
    #[error("response exceeded size cap: {0}")]
    Overflow(String),
    #[error("provider refused: {0}")]
    Refusal(String),
    #[error("network failure: {0}")]
    Network(String),
}

impl TransportFailure {
    pub fn status(&self) -> ResponseStatus {
        match self {
            TransportFailure::Timeout => ResponseStatus::Timeout,
            TransportFailure::Overflow(_) => ResponseStatus::TokenOverflow,
            TransportFailure::Refusal(_) | TransportFailure::Network(_) => ResponseStatus::ProviderError,
        }
    }

    fn retryable(&self) -> bool {
        matches!(self, TransportFailure::Network(_))
    }
}

/// One request/response pair, kept verbatim for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub model_id: String,
    pub attempt: u32,
    pub request: serde_json::Value,
    pub response_body: String,
    pub http_status: Option<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    /// Set by simulated providers; puts the fan-out on a virtual clock.
    pub simulated_latency_ms: Option<u64>,
    pub exchange: Option<Exchange>,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        ProviderReply {
            text: text.into(),
            simulated_latency_ms: None,
            exchange: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueryContext {
    pub timeout: Duration,
    pub seed: u64,
    /// Zero for the first try.
    pub attempt: u32,
}

/// A provider failure, optionally with the exchange that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderFailure {
    pub failure: TransportFailure,
    pub exchange: Option<Exchange>,
    pub simulated_latency_ms: Option<u64>,
}

impl From<TransportFailure> for ProviderFailure {
    fn from(failure: TransportFailure) -> Self {
        ProviderFailure {
            failure,
            exchange: None,
            simulated_latency_ms: None,
        }
    }
}

/// Source of model output: a live endpoint or the simulated population.
#[async_trait]
pub trait ProviderPort: Send + Sync {
    async fn query(
        &self,
        model: &ModelDescriptor,
        case: &ClinicalCase,
        ctx: QueryContext,
    ) -> Result<ProviderReply, ProviderFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub case_id: String,
    pub model_ids: Vec<String>,
    pub per_model_timeout_ms: u64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub seed: u64,
    /// Budget for the whole fan-out. Models unfinished at the deadline time out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,
}

pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;
pub const DEFAULT_MAX_RETRIES: u32 = 1;
pub const DEFAULT_MAX_PARALLEL: usize = 8;

impl QueryPlan {
    pub fn new<S: Into<String>>(
        case_id: impl Into<String>,
        model_ids: impl IntoIterator<Item = S>,
        seed: u64,
    ) -> Self {
        QueryPlan {
            case_id: case_id.into(),
            model_ids: model_ids.into_iter().map(Into::into).collect(),
            per_model_timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
            max_parallel: DEFAULT_MAX_PARALLEL,
            seed,
            deadline_ms: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::PlanInvalid(m.to_string()));
        if self.model_ids.is_empty() {
            return invalid("no models selected");
        }
        let mut seen = BTreeSet::new();
        for id in &self.model_ids {
            if !seen.insert(id) {
                return Err(GatewayError::PlanInvalid(format!("model `{id}` listed twice")));
            }
        }
        if self.per_model_timeout_ms == 0 {
            return invalid("per-model timeout must be positive");
        }
        if self.max_parallel == 0 {
            return invalid("max_parallel must be at least 1");
        }
        if self.deadline_ms == Some(0) {
            return invalid("deadline must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutResult {
    pub case_id: String,
    pub responses: Vec<ModelResponse>,
    pub wall_time_ms: u64,
    pub plan_echo: QueryPlan,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
}

impl FanoutResult {
    pub fn response(&self, model_id: &str) -> Option<&ModelResponse> {
        self.responses
            .binary_search_by(|r| r.model_id.as_str().cmp(model_id))
            .ok()
            .map(|i| &self.responses[i])
    }
}

struct ModelOutcome {
    response: ModelResponse,
    exchanges: Vec<Exchange>,
    /// Total virtual time across attempts; None when measured.
    virtual_ms: Option<u64>,
}

async fn query_with_retries(
    provider: Arc<dyn ProviderPort>,
    model: ModelDescriptor,
    case: Arc<ClinicalCase>,
    plan: Arc<QueryPlan>,
) -> ModelOutcome {
    let timeout = Duration::from_millis(plan.per_model_timeout_ms);
    let mut exchanges = Vec::new();
    let mut virtual_ms: Option<u64> = None;
    let started = Instant::now();
    let mut attempt = 0;
    let result = loop {
        let ctx = QueryContext {
            timeout,
            seed: plan.seed,
            attempt,
        };
        let outcome = match tokio::time::timeout(timeout, provider.query(&model, &case, ctx)).await {
            Err(_) => Err(ProviderFailure::from(TransportFailure::Timeout)),
            Ok(Ok(reply)) => match reply.simulated_latency_ms {
                Some(ms) if ms > plan.per_model_timeout_ms => Err(ProviderFailure {
                    failure: TransportFailure::Timeout,
                    exchange: reply.exchange,
                    simulated_latency_ms: Some(ms),
                }),
                _ => Ok(reply),
            },
            Ok(Err(failure)) => Err(failure),
        };
        let simulated = match &outcome {
            Ok(r) => r.simulated_latency_ms,
            Err(f) => f.simulated_latency_ms,
        };
        if let Some(ms) = simulated {
            let charged = ms.min(plan.per_model_timeout_ms);
            virtual_ms = Some(virtual_ms.unwrap_or(0) + charged);
        }
        match outcome {
            Ok(reply) => {
                exchanges.extend(reply.exchange.clone());
                break Ok(reply);
            }
            Err(f) => {
                exchanges.extend(f.exchange.clone());
                if f.failure.retryable() && attempt < plan.max_retries {
                    attempt += 1;
                    continue;
                }
                break Err(f.failure);
            }
        }
    };
    let latency_ms = virtual_ms.unwrap_or_else(|| started.elapsed().as_millis() as u64);
    let mut response = match result {
        Ok(reply) => parse_response(&reply.text, &model.model_id, &case.case_id),
        Err(failure) => {
            ModelResponse::failed(&model.model_id, &case.case_id, failure.status(), failure.to_string())
        }
    };
    response.latency_ms = match response.status {
        ResponseStatus::Timeout if virtual_ms.is_none() => plan.per_model_timeout_ms.max(latency_ms),
        _ => latency_ms,
    };
    ModelOutcome {
        response,
        exchanges,
        virtual_ms,
    }
}

/// Makespan of greedy list scheduling over `max_parallel` slots, in plan order.
fn virtual_makespan(durations: &[u64], max_parallel: usize) -> u64 {
    let mut slots = vec![0u64; max_parallel.min(durations.len()).max(1)];
    for d in durations {
        let earliest = slots.iter_mut().min().expect("at least one slot");
        *earliest += d;
    }
    slots.into_iter().max().unwrap_or(0)
}

/// Queries every planned model and returns exactly one response per model.
pub async fn execute_fanout(
    plan: &QueryPlan,
    case: &ClinicalCase,
    registry: &RegistrySnapshot,
    provider: Arc<dyn ProviderPort>,
) -> Result<FanoutResult, GatewayError> {
    plan.validate()?;
    if plan.case_id != case.case_id {
        return Err(GatewayError::PlanInvalid(format!(
            "plan is for case `{}` but case `{}` was supplied",
            plan.case_id, case.case_id
        )));
    }
    let mut models = Vec::with_capacity(plan.model_ids.len());
    for id in &plan.model_ids {
        let Some(d) = registry.get(id) else {
            return Err(GatewayError::PlanInvalid(format!("model `{id}` is not registered")));
        };
        if !d.enabled {
            return Err(GatewayError::PlanInvalid(format!("model `{id}` is disabled")));
        }
        models.push(d.clone());
    }

    let started = Instant::now();
    let shared_plan = Arc::new(plan.clone());
    let shared_case = Arc::new(case.clone());
    let permits = Arc::new(Semaphore::new(plan.max_parallel));
    let mut tasks = JoinSet::new();
    for (index, model) in models.iter().cloned().enumerate() {
        let provider = Arc::clone(&provider);
        let plan = Arc::clone(&shared_plan);
        let case = Arc::clone(&shared_case);
        let permits = Arc::clone(&permits);
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore never closed");
            (index, query_with_retries(provider, model, case, plan).await)
        });
    }

    let mut outcomes: Vec<Option<ModelOutcome>> = (0..models.len()).map(|_| None).collect();
    let collect = async {
        while let Some(joined) = tasks.join_next().await {
            match joined {
                Ok((index, outcome)) => outcomes[index] = Some(outcome),
                Err(e) if e.is_panic() => {
                    // A panicking provider fails only its own model; the slot is
                    // filled below with a ProviderError.
                }
                Err(_) => {}
            }
        }
    };
    let deadline_hit = match plan.deadline_ms {
        Some(ms) => tokio::time::timeout(Duration::from_millis(ms), collect).await.is_err(),
        None => {
            collect.await;
            false
        }
    };
    tasks.abort_all();

    let mut exchanges = Vec::new();
    let mut virtual_durations = Vec::with_capacity(models.len());
    let mut all_virtual = true;
    let mut responses = Vec::with_capacity(models.len());
    for (model, outcome) in models.iter().zip(outcomes) {
        match outcome {
            Some(o) => {
                match o.virtual_ms {
                    Some(ms) => virtual_durations.push(ms),
                    None => all_virtual = false,
                }
                exchanges.extend(o.exchanges);
                responses.push(o.response);
            }
            None => {
                all_virtual = false;
                let response = if deadline_hit {
                    let mut r = ModelResponse::failed(
                        &model.model_id,
                        &case.case_id,
                        ResponseStatus::Timeout,
                        "fan-out deadline reached",
                    );
                    r.latency_ms = started.elapsed().as_millis() as u64;
                    r
                } else {
                    ModelResponse::failed(
                        &model.model_id,
                        &case.case_id,
                        ResponseStatus::ProviderError,
                        "provider task aborted",
                    )
                };
                responses.push(response);
            }
        }
    }
    let wall_time_ms = if all_virtual {
        virtual_makespan(&virtual_durations, plan.max_parallel)
    } else {
        started.elapsed().as_millis() as u64
    };
    responses.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    exchanges.sort_by(|a, b| a.model_id.cmp(&b.model_id).then(a.attempt.cmp(&b.attempt)));
    Ok(FanoutResult {
        case_id: case.case_id.clone(),
        responses,
        wall_time_ms,
        plan_echo: plan.clone(),
        exchanges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{CostTier, Region};

    #[test]
    fn makespan() {
        assert_eq!(virtual_makespan(&[10, 20, 30], 1), 60);
        assert_eq!(virtual_makespan(&[10, 20, 30], 3), 30);
        assert_eq!(virtual_makespan(&[10, 20, 30, 5], 2), 40);
        assert_eq!(virtual_makespan(&[], 4), 0);
    }

    #[test]
    fn plan_validation() {
        let ok = QueryPlan::new("c", ["a", "b"], 1);
        assert!(ok.validate().is_ok());
        assert!(QueryPlan::new("c", ["a", "a"], 1).validate().is_err());
        assert!(QueryPlan::new("c", Vec::<String>::new(), 1).validate().is_err());
        let mut p = ok.clone();
        p.per_model_timeout_ms = 0;
        assert!(p.validate().is_err());
        let mut p = ok;
        p.max_parallel = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn failure_status_mapping() {
        assert_eq!(TransportFailure::Timeout.status(), ResponseStatus::Timeout);
        assert_eq!(TransportFailure::Overflow("x".into()).status(), ResponseStatus::TokenOverflow);
        assert_eq!(TransportFailure::Refusal("x".into()).status(), ResponseStatus::ProviderError);
        assert_eq!(TransportFailure::Network("x".into()).status(), ResponseStatus::ProviderError);
        assert!(TransportFailure::Network("x".into()).retryable());
        assert!(!TransportFailure::Timeout.retryable());
        assert!(!TransportFailure::Overflow("x".into()).retryable());
    }

    struct Echo;

    #[async_trait]
    impl ProviderPort for Echo {
        async fn query(
            &self,
            model: &ModelDescriptor,
            _case: &ClinicalCase,
            _ctx: QueryContext,
        ) -> Result<ProviderReply, ProviderFailure> {
            if model.model_id == "panics" {
                panic!("provider bug");
            }
            Ok(ProviderReply::text(format!(
                "```diagnoses\n[{{\"label\": \"{}\", \"codes\": [], \"confidence\": 0.5, \"rationale\": \"\"}}]\n```",
                model.model_id
            )))
        }
    }

    #[tokio::test]
    async fn panicking_provider_fails_only_its_model() {
        let snap = RegistrySnapshot::from_models(["a", "panics", "z"].map(|id| {
            ModelDescriptor::new(id, Region::US, CostTier::Free)
        }));
        let plan = QueryPlan::new("c", ["z", "panics", "a"], 0);
        let case = ClinicalCase::new("c", "t", "n");
        let out = execute_fanout(&plan, &case, &snap, Arc::new(Echo)).await.unwrap();
        let ids: Vec<_> = out.responses.iter().map(|r| r.model_id.as_str()).collect();
        assert_eq!(ids, ["a", "panics", "z"]);
        assert_eq!(out.responses[1].status, ResponseStatus::ProviderError);
        assert!(out.responses[0].is_ok() && out.responses[2].is_ok());
    }

    #[tokio::test]
    async fn unknown_or_disabled_model_is_plan_invalid() {
        let mut off = ModelDescriptor::new("off", Region::US, CostTier::Free);
        off.enabled = false;
        let snap = RegistrySnapshot::from_models([off]);
        let case = ClinicalCase::new("c", "t", "n");
        for ids in [["off"], ["missing"]] {
            let plan = QueryPlan::new("c", ids, 0);
            assert!(matches!(
                execute_fanout(&plan, &case, &snap, Arc::new(Echo)).await,
                Err(GatewayError::PlanInvalid(_))
            ));
        }
    }
}
