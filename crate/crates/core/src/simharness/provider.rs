//! Provider port backed by the simulator.
//!
//! Replies always carry a simulated latency, which puts the fan-out on its
//! virtual clock. Fabrication ground truth goes to a ledger that only test
//! and harness code reads.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use super::{FaultKind, SimModelProfile, Simulator};
use crate::casemodel::ClinicalCase;
use crate::gateway::{ProviderFailure, ProviderPort, ProviderReply, QueryContext, TransportFailure};
use crate::registry::ModelDescriptor;

pub struct SimulatedProvider {
    simulator: Arc<Simulator>,
    profiles: BTreeMap<String, SimModelProfile>,
    /// (case_id, model_id) → fabricated key.
    fabrications: Mutex<BTreeMap<(String, String), String>>,
}

impl SimulatedProvider {
    pub fn new(simulator: Arc<Simulator>, profiles: impl IntoIterator<Item = SimModelProfile>) -> Self {
        SimulatedProvider {
            simulator,
            profiles: profiles.into_iter().map(|p| (p.model_id.clone(), p)).collect(),
            fabrications: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn profile(&self, model_id: &str) -> Option<&SimModelProfile> {
        self.profiles.get(model_id)
    }

    /// Fabricated keys emitted so far for `case_id`, by model.
    pub fn fabrications(&self, case_id: &str) -> BTreeMap<String, String> {
        self.fabrications
            .lock()
            .expect("ledger lock")
            .iter()
            .filter(|((c, _), _)| c == case_id)
            .map(|((_, m), k)| (m.clone(), k.clone()))
            .collect()
    }
}

#[async_trait]
impl ProviderPort for SimulatedProvider {
    async fn query(
        &self,
        model: &ModelDescriptor,
        case: &ClinicalCase,
        ctx: QueryContext,
    ) -> Result<ProviderReply, ProviderFailure> {
        let Some(profile) = self.profiles.get(&model.model_id) else {
            return Err(TransportFailure::Refusal(format!("no simulated profile for `{}`", model.model_id)).into());
        };
        let out = self
            .simulator
            .simulate_response(profile, case, ctx.seed)
            .map_err(|e| ProviderFailure::from(TransportFailure::Refusal(e.to_string())))?;
        let timeout_ms = ctx.timeout.as_millis() as u64;
        let fail = |failure, latency| ProviderFailure {
            failure,
            exchange: None,
            simulated_latency_ms: Some(latency),
        };
        match self.simulator.draw_fault(profile, case, ctx.seed, ctx.attempt) {
            Some(FaultKind::Timeout) => {
                return Ok(ProviderReply {
                    text: String::new(),
                    simulated_latency_ms: Some(timeout_ms.saturating_add(1)),
                    exchange: None,
                })
            }
            Some(FaultKind::Network) => {
                return Err(fail(TransportFailure::Network("simulated connection reset".into()), out.latency_ms / 4))
            }
            Some(FaultKind::Overflow) => {
                return Err(fail(TransportFailure::Overflow("simulated oversized reply".into()), out.latency_ms))
            }
            Some(FaultKind::Malformed) => {
                let prose = out.text.split("```").next().unwrap_or_default().trim_end().to_string();
                return Ok(ProviderReply {
                    text: format!("{prose}\nStructured output unavailable."),
                    simulated_latency_ms: Some(out.latency_ms),
                    exchange: None,
                });
            }
            None => {}
        }
        if let Some(key) = &out.fabricated {
            self.fabrications
                .lock()
                .expect("ledger lock")
                .insert((case.case_id.clone(), model.model_id.clone()), key.clone());
        }
        Ok(ProviderReply {
            text: out.text,
            simulated_latency_ms: Some(out.latency_ms),
            exchange: None,
        })
    }
}
