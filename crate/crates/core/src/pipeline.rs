//! One case end to end: fan-out, stratification, bias analysis, report.
//!
//! The analysis half ([`analyze_responses`]) is a pure function of the stored
//! responses, which is what replay and restratify rely on.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biaslens::{analyze, AnalysisConfig, BiasFindings};
use crate::casemodel::{ClinicalCase, ModelResponse};
use crate::consensus::{stratify, ConsensusError, StratifiedDifferential};
use crate::gateway::{execute_fanout, FanoutResult, GatewayError, ProviderPort, QueryPlan};
use crate::registry::RegistrySnapshot;
use crate::synthesis::{
    build_report, render_template, response_statuses, EnsembleReport, NarrativePort, ReportInputs, RunIdentity,
    SynthesizerChain,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("model `{0}` is not part of this run")]
    SubsetNotInRun(String),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

/// Everything recomputable from a run's stored responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub differential: StratifiedDifferential,
    pub findings: BiasFindings,
    pub template_narrative: String,
}

pub fn analyze_responses(
    case: &ClinicalCase,
    responses: &[ModelResponse],
    registry: &RegistrySnapshot,
    config: &AnalysisConfig,
) -> Result<Analysis, ConsensusError> {
    let differential = stratify(responses, &config.synonyms)?;
    let findings = analyze(case, responses, registry, config);
    let template_narrative = render_template(&differential, &findings, registry, &response_statuses(responses));
    Ok(Analysis {
        differential,
        findings,
        template_narrative,
    })
}

/// Re-analyzes a stored run restricted to `subset`, without re-querying.
pub fn restratify(
    case: &ClinicalCase,
    responses: &[ModelResponse],
    registry: &RegistrySnapshot,
    config: &AnalysisConfig,
    subset: &BTreeSet<String>,
) -> Result<Analysis, PipelineError> {
    let present: BTreeSet<&str> = responses.iter().map(|r| r.model_id.as_str()).collect();
    if let Some(stray) = subset.iter().find(|m| !present.contains(m.as_str())) {
        return Err(PipelineError::SubsetNotInRun(stray.clone()));
    }
    let kept: Vec<ModelResponse> = responses.iter().filter(|r| subset.contains(&r.model_id)).cloned().collect();
    let restricted = registry.restrict(subset.iter().map(String::as_str));
    Ok(analyze_responses(case, &kept, &restricted, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub fanout: FanoutResult,
    /// `None` when no model responded usably.
    pub differential: Option<StratifiedDifferential>,
    pub findings: BiasFindings,
    pub report: Option<EnsembleReport>,
}

impl RunArtifacts {
    pub fn no_responders(&self) -> bool {
        self.differential.is_none()
    }
}

pub struct RunRequest<'a> {
    pub case: &'a ClinicalCase,
    /// Snapshot the run is pinned to; every planned model must be in it.
    pub registry: &'a RegistrySnapshot,
    pub plan: &'a QueryPlan,
    pub chain: &'a SynthesizerChain,
    pub config: &'a AnalysisConfig,
    pub identity: RunIdentity,
}

pub async fn run_pipeline(
    request: RunRequest<'_>,
    provider: Arc<dyn ProviderPort>,
    narrator: &dyn NarrativePort,
) -> Result<RunArtifacts, PipelineError> {
    let fanout = execute_fanout(request.plan, request.case, request.registry, provider).await?;
    let findings = analyze(request.case, &fanout.responses, request.registry, request.config);
    let differential = match stratify(&fanout.responses, &request.config.synonyms) {
        Ok(d) => Some(d),
        Err(ConsensusError::NoResponders) => None,
        Err(e) => return Err(e.into()),
    };
    let report = match &differential {
        Some(d) => {
            let inputs = ReportInputs {
                case: request.case,
                differential: d,
                findings: &findings,
                responses: &fanout.responses,
                registry: request.registry,
                synonyms: &request.config.synonyms,
            };
            Some(build_report(inputs, request.chain, narrator, request.identity).await)
        }
        None => None,
    };
    Ok(RunArtifacts {
        fanout,
        differential,
        findings,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::synthesis::NoSynthesizer;

    fn identity() -> RunIdentity {
        RunIdentity {
            run_id: "r".into(),
            generated_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    async fn run(case_id: &str, seed: u64) -> RunArtifacts {
        let case = assets::fixture_cases().into_iter().find(|c| c.case_id == case_id).unwrap();
        let registry = RegistrySnapshot::from_models(assets::population().into_iter().map(|(d, _)| d));
        let plan = QueryPlan::new(case_id, registry.iter().map(|d| d.model_id.clone()), seed);
        let config = assets::analysis_config();
        let chain = SynthesizerChain::template_only();
        let request = RunRequest {
            case: &case,
            registry: &registry,
            plan: &plan,
            chain: &chain,
            config: &config,
            identity: identity(),
        };
        run_pipeline(request, Arc::new(assets::simulated_provider()), &NoSynthesizer).await.unwrap()
    }

    #[tokio::test]
    async fn fmf_case_leads_with_fmf() {
        let a = run("fmf", 7).await;
        let d = a.differential.as_ref().unwrap();
        assert_eq!(d.leading().unwrap().0, "m04");
        assert_eq!(a.report.as_ref().unwrap().narrative_source, "template");
    }

    #[tokio::test]
    async fn stored_responses_replay() {
        let a = run("wilson", 3).await;
        let case = assets::fixture_cases().into_iter().find(|c| c.case_id == "wilson").unwrap();
        let registry = RegistrySnapshot::from_models(assets::population().into_iter().map(|(d, _)| d));
        let again = analyze_responses(&case, &a.fanout.responses, &registry, &assets::analysis_config()).unwrap();
        assert_eq!(Some(&again.differential), a.differential.as_ref());
        assert_eq!(again.findings, a.findings);
        assert_eq!(again.template_narrative, a.report.unwrap().template_narrative);
    }

    #[tokio::test]
    async fn restratify_checks_subset() {
        let a = run("behcet", 1).await;
        let case = assets::fixture_cases().into_iter().find(|c| c.case_id == "behcet").unwrap();
        let registry = RegistrySnapshot::from_models(assets::population().into_iter().map(|(d, _)| d));
        let cfg = assets::analysis_config();
        let subset = BTreeSet::from(["nobody".to_string()]);
        assert!(matches!(
            restratify(&case, &a.fanout.responses, &registry, &cfg, &subset),
            Err(PipelineError::SubsetNotInRun(_))
        ));
        assert!(matches!(
            restratify(&case, &a.fanout.responses, &registry, &cfg, &BTreeSet::new()),
            Err(PipelineError::Consensus(ConsensusError::NoResponders))
        ));
        let all: BTreeSet<String> = a.fanout.responses.iter().map(|r| r.model_id.clone()).collect();
        let full = restratify(&case, &a.fanout.responses, &registry, &cfg, &all).unwrap();
        assert_eq!(Some(full.differential), a.differential);
    }
}
