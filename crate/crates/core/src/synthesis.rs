//! Report assembly: tiered differential, provenance, bias findings and a
//! narrative from the first synthesizer in the chain that answers.
//!
//! Every structured field is computed by the consensus and bias stages; a
//! synthesizer only contributes prose. The last chain entry is always the
//! built-in template, so building a report cannot fail.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biaslens::BiasFindings;
use crate::casemodel::{ClinicalCase, ModelResponse, ResponseStatus};
use crate::consensus::{canonical_key, percent_half_up, StratifiedDifferential, SynonymTable, Tier};
use crate::gateway::{LiveProvider, QueryContext};
use crate::registry::{ModelDescriptor, Region, RegistrySnapshot};

pub const TEMPLATE: &str = "template";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("synthesizer chain is empty")]
    Empty,
    #[error("synthesizer chain must end with exactly one `template` entry")]
    TemplatePlacement,
    #[error("synthesizer timeout must be positive")]
    ZeroTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEntry {
    /// A model id, or `template`.
    pub synthesizer_ref: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChainEntry>", into = "Vec<ChainEntry>")]
pub struct SynthesizerChain {
    entries: Vec<ChainEntry>,
}

impl TryFrom<Vec<ChainEntry>> for SynthesizerChain {
    type Error = ChainError;

    fn try_from(entries: Vec<ChainEntry>) -> Result<Self, Self::Error> {
        SynthesizerChain::new(entries)
    }
}

impl From<SynthesizerChain> for Vec<ChainEntry> {
    fn from(c: SynthesizerChain) -> Self {
        c.entries
    }
}

impl SynthesizerChain {
    pub fn new(entries: Vec<ChainEntry>) -> Result<Self, ChainError> {
        let Some(last) = entries.last() else {
            return Err(ChainError::Empty);
        };
        let templates = entries.iter().filter(|e| e.synthesizer_ref == TEMPLATE).count();
        if last.synthesizer_ref != TEMPLATE || templates != 1 {
            return Err(ChainError::TemplatePlacement);
        }
        if entries.iter().any(|e| e.timeout_ms == 0) {
            return Err(ChainError::ZeroTimeout);
        }
        Ok(SynthesizerChain { entries })
    }

    /// `models…, template`, all with the same timeout.
    pub fn of<S: Into<String>>(models: impl IntoIterator<Item = S>, timeout_ms: u64) -> Result<Self, ChainError> {
        let mut entries: Vec<ChainEntry> = models
            .into_iter()
            .map(|m| ChainEntry {
                synthesizer_ref: m.into(),
                timeout_ms,
            })
            .collect();
        entries.push(ChainEntry {
            synthesizer_ref: TEMPLATE.into(),
            timeout_ms,
        });
        SynthesizerChain::new(entries)
    }

    pub fn template_only() -> Self {
        SynthesizerChain::of(Vec::<String>::new(), 1).expect("template-only chain is valid")
    }

    pub fn entries(&self) -> &[ChainEntry] {
        &self.entries
    }
}

/// Everything a synthesizer is given.
#[derive(Debug, Clone, Serialize)]
pub struct SynthesisRequest<'a> {
    pub case: &'a ClinicalCase,
    pub differential: &'a StratifiedDifferential,
    pub findings: &'a BiasFindings,
    pub template_narrative: &'a str,
}

/// Produces narrative prose from a structured differential.
#[async_trait]
pub trait NarrativePort: Send + Sync {
    async fn synthesize(&self, synthesizer_ref: &str, request: &SynthesisRequest<'_>) -> Result<String, String>;
}

/// Narrative port that never answers; every chain falls through to the template.
pub struct NoSynthesizer;

#[async_trait]
impl NarrativePort for NoSynthesizer {
    async fn synthesize(&self, synthesizer_ref: &str, _request: &SynthesisRequest<'_>) -> Result<String, String> {
        Err(format!("no synthesizer available for `{synthesizer_ref}`"))
    }
}

pub const SYNTHESIS_PROMPT: &str = "You summarise a multi-model differential diagnosis for a clinician. \
Keep every diagnosis listed in the input, including minority ones, and say which models raised each. \
Do not pick a single answer and do not change any counts or percentages. Mention the bias signals provided.";

/// Live synthesizer: asks a registered model to write the narrative.
pub struct LiveSynthesizer {
    pub provider: LiveProvider,
    pub registry: RegistrySnapshot,
}

#[async_trait]
impl NarrativePort for LiveSynthesizer {
    async fn synthesize(&self, synthesizer_ref: &str, request: &SynthesisRequest<'_>) -> Result<String, String> {
        let model: ModelDescriptor = self
            .registry
            .get(synthesizer_ref)
            .cloned()
            .ok_or_else(|| format!("synthesizer `{synthesizer_ref}` is not registered"))?;
        let user = serde_json::to_string_pretty(request).map_err(|e| e.to_string())?;
        let ctx = QueryContext {
            timeout: Duration::from_secs(600),
            seed: 0,
            attempt: 0,
        };
        self.provider
            .chat(&model, SYNTHESIS_PROMPT, &user, ctx)
            .await
            .map(|r| r.text)
            .map_err(|f| f.failure.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisAttempt {
    pub synthesizer_ref: String,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    Timeout,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub model_id: String,
    pub origin_region: Region,
    /// The model's own wording.
    pub label: String,
    pub confidence: f64,
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub run_id: String,
    /// RFC 3339.
    pub generated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub case_id: String,
    pub run_id: String,
    pub generated_at: String,
    pub differential: StratifiedDifferential,
    pub bias_findings: BiasFindings,
    pub narrative: String,
    pub narrative_source: String,
    pub template_narrative: String,
    /// Key → supporting models (any rank), by model id.
    pub provenance: BTreeMap<String, Vec<ProvenanceEntry>>,
    pub response_statuses: BTreeMap<String, ResponseStatus>,
    pub registry_snapshot_ref: String,
    pub attempts: Vec<SynthesisAttempt>,
}

/// Inputs shared by the template and the report builder.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub case: &'a ClinicalCase,
    pub differential: &'a StratifiedDifferential,
    pub findings: &'a BiasFindings,
    pub responses: &'a [ModelResponse],
    pub registry: &'a RegistrySnapshot,
    pub synonyms: &'a SynonymTable,
}

/// Each model's best-ranked listing of each key it mentioned.
pub fn provenance(
    responses: &[ModelResponse],
    registry: &RegistrySnapshot,
    synonyms: &SynonymTable,
) -> BTreeMap<String, Vec<ProvenanceEntry>> {
    let mut out: BTreeMap<String, BTreeMap<String, ProvenanceEntry>> = BTreeMap::new();
    for r in responses.iter().filter(|r| r.is_ok()) {
        let Some(region) = registry.region_of(&r.model_id) else {
            continue;
        };
        for c in &r.candidates {
            out.entry(canonical_key(c, synonyms))
                .or_default()
                .entry(r.model_id.clone())
                .or_insert_with(|| ProvenanceEntry {
                    model_id: r.model_id.clone(),
                    origin_region: region,
                    label: c.label.clone(),
                    confidence: c.confidence,
                    rank: c.rank,
                });
        }
    }
    out.into_iter().map(|(k, m)| (k, m.into_values().collect())).collect()
}

fn region_line(models: impl IntoIterator<Item = impl AsRef<str>>, registry: &RegistrySnapshot) -> String {
    let mut counts: BTreeMap<Region, usize> = BTreeMap::new();
    let mut unknown = 0;
    for m in models {
        match registry.region_of(m.as_ref()) {
            Some(r) => *counts.entry(r).or_default() += 1,
            None => unknown += 1,
        }
    }
    let mut parts: Vec<String> = counts.into_iter().map(|(r, n)| format!("{r} {n}")).collect();
    if unknown > 0 {
        parts.push(format!("unregistered {unknown}"));
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(", ")
    }
}

fn tier_heading(tier: Tier) -> &'static str {
    match tier {
        Tier::Primary => "CONSENSUS (Primary: at least 30% of responding models ranked it first)",
        Tier::Alternative => "ALTERNATIVES (Alternative: 10-29% ranked it first)",
        Tier::Minority => "MINORITY (Minority: under 10% ranked it first)",
    }
}

/// Deterministic narrative covering every key of the differential.
pub fn render_template(
    differential: &StratifiedDifferential,
    findings: &BiasFindings,
    registry: &RegistrySnapshot,
    statuses: &BTreeMap<String, ResponseStatus>,
) -> String {
    let n = differential.responding_count;
    let mut out = String::new();
    let _ = writeln!(out, "Ensemble differential for case {}", differential.case_id);
    let _ = writeln!(out, "Responding models: {n} of {}", statuses.len().max(n));
    let _ = writeln!(out, "Distinct diagnoses: {}", differential.breadth);

    for tier in Tier::ALL {
        let _ = writeln!(out, "\n{}", tier_heading(tier));
        let entries = differential.tier(tier);
        if entries.is_empty() {
            let _ = writeln!(out, "(none)");
        }
        for (key, e) in entries {
            let _ = writeln!(
                out,
                "- {} [{key}] {}% ({}/{n} first choices), mean confidence {:.2}",
                e.diagnosis.display_label,
                percent_half_up(e.top1_count, n),
                e.top1_count,
                e.mean_confidence
            );
            let _ = writeln!(
                out,
                "  flagged by {} models; regions: {}",
                e.supporting_models.len(),
                region_line(&e.supporting_models, registry)
            );
        }
    }

    let _ = writeln!(out, "\nOTHER MENTIONS (listed below first place only)");
    let others = differential.untiered();
    if others.is_empty() {
        let _ = writeln!(out, "(none)");
    }
    for (key, e) in others {
        let _ = writeln!(
            out,
            "- {} [{key}] listed by {} models, mean confidence {:.2}; regions: {}",
            e.diagnosis.display_label,
            e.any_mention_count,
            e.mean_confidence,
            region_line(&e.supporting_models, registry)
        );
    }

    let _ = writeln!(out, "\nBIAS SIGNALS");
    let _ = writeln!(
        out,
        "Uncertainty markers: {}; confidence markers: {}",
        findings.uncertainty_count, findings.confidence_count
    );
    for (term, rates) in &findings.mentions_per_model_by_region {
        let parts: Vec<String> = rates.iter().map(|(r, v)| format!("{r} {v:.1}")).collect();
        let shown = if parts.is_empty() { "no responders".to_string() } else { parts.join(", ") };
        let _ = writeln!(out, "Mentions of {term} per model by region: {shown}");
    }
    if !findings.demographic_anchoring.is_empty() {
        let parts: Vec<String> = findings
            .demographic_anchoring
            .iter()
            .map(|(t, v)| format!("{t} {v:.1}"))
            .collect();
        let _ = writeln!(out, "Demographic anchoring per model: {}", parts.join(", "));
    }
    let s = findings.treatment_split;
    let _ = writeln!(
        out,
        "Treatment approach: aggressive {}, conservative {}, unclassified {}",
        s.aggressive, s.conservative, s.unclassified
    );
    if !findings.watch_mentions.is_empty() {
        let parts: Vec<String> = findings.watch_mentions.iter().map(|(t, v)| format!("{t} {v}")).collect();
        let _ = writeln!(out, "Watched terms: {}", parts.join(", "));
    }

    let _ = writeln!(out, "\nRESPONSE STATUS");
    let mut by_status: BTreeMap<&str, usize> = BTreeMap::new();
    for s in statuses.values() {
        *by_status.entry(s.as_str()).or_default() += 1;
    }
    let parts: Vec<String> = ResponseStatus::ALL
        .iter()
        .filter_map(|s| by_status.get(s.as_str()).map(|n| format!("{} {n}", s.as_str())))
        .collect();
    let _ = writeln!(out, "{}", if parts.is_empty() { "no responses".into() } else { parts.join("; ") });
    for (model, status) in statuses.iter().filter(|(_, s)| **s != ResponseStatus::Ok) {
        let _ = writeln!(out, "- {model}: {}", status.as_str());
    }
    out
}

pub fn response_statuses(responses: &[ModelResponse]) -> BTreeMap<String, ResponseStatus> {
    responses.iter().map(|r| (r.model_id.clone(), r.status)).collect()
}

/// Builds the report, trying chain entries in order until one answers.
pub async fn build_report(
    inputs: ReportInputs<'_>,
    chain: &SynthesizerChain,
    port: &dyn NarrativePort,
    identity: RunIdentity,
) -> EnsembleReport {
    let statuses = response_statuses(inputs.responses);
    let template = render_template(inputs.differential, inputs.findings, inputs.registry, &statuses);
    let request = SynthesisRequest {
        case: inputs.case,
        differential: inputs.differential,
        findings: inputs.findings,
        template_narrative: &template,
    };
    let mut attempts = Vec::new();
    let mut chosen: Option<(String, String)> = None;
    for entry in chain.entries() {
        if entry.synthesizer_ref == TEMPLATE {
            attempts.push(SynthesisAttempt {
                synthesizer_ref: TEMPLATE.into(),
                outcome: AttemptOutcome::Ok,
            });
            chosen = Some((TEMPLATE.into(), template.clone()));
            break;
        }
        let call = port.synthesize(&entry.synthesizer_ref, &request);
        let outcome = match tokio::time::timeout(Duration::from_millis(entry.timeout_ms), call).await {
            Err(_) => AttemptOutcome::Timeout,
            Ok(Err(e)) => AttemptOutcome::Failed(e),
            Ok(Ok(text)) if text.trim().is_empty() => AttemptOutcome::Failed("empty narrative".into()),
            Ok(Ok(text)) => {
                chosen = Some((entry.synthesizer_ref.clone(), text));
                AttemptOutcome::Ok
            }
        };
        attempts.push(SynthesisAttempt {
            synthesizer_ref: entry.synthesizer_ref.clone(),
            outcome,
        });
        if chosen.is_some() {
            break;
        }
    }
    let (narrative_source, narrative) = chosen.expect("chain ends with the template");
    EnsembleReport {
        case_id: inputs.case.case_id.clone(),
        run_id: identity.run_id,
        generated_at: identity.generated_at,
        differential: inputs.differential.clone(),
        bias_findings: inputs.findings.clone(),
        narrative,
        narrative_source,
        template_narrative: template,
        provenance: provenance(inputs.responses, inputs.registry, inputs.synonyms),
        response_statuses: statuses,
        registry_snapshot_ref: inputs.registry.digest(),
        attempts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleModelView {
    pub model_id: String,
    pub label: String,
    pub key: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleView {
    /// (display label, key, percent of first choices) for Primary keys.
    pub primary: Vec<(String, String, u32)>,
    pub alternative_count: usize,
    pub minority_count: usize,
    pub other_mentions: usize,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleVsEnsemble {
    pub single: Option<SingleModelView>,
    pub ensemble: EnsembleView,
}

/// What one model alone would have said, next to the ensemble summary.
///
/// The single-model column is the most confident first choice of any
/// responding model (ties go to the lowest model id).
pub fn single_vs_ensemble_view(report: &EnsembleReport) -> SingleVsEnsemble {
    let mut single: Option<SingleModelView> = None;
    for (key, entries) in &report.provenance {
        for p in entries.iter().filter(|p| p.rank == 1) {
            let better = match &single {
                None => true,
                Some(s) => p.confidence > s.confidence || (p.confidence == s.confidence && p.model_id < s.model_id),
            };
            if better {
                single = Some(SingleModelView {
                    model_id: p.model_id.clone(),
                    label: p.label.clone(),
                    key: key.clone(),
                    confidence: p.confidence,
                });
            }
        }
    }
    let d = &report.differential;
    let primary: Vec<(String, String, u32)> = d
        .tier(Tier::Primary)
        .into_iter()
        .map(|(k, e)| {
            (
                e.diagnosis.display_label.clone(),
                k.clone(),
                percent_half_up(e.top1_count, d.responding_count),
            )
        })
        .collect();
    let alternative_count = d.tier(Tier::Alternative).len();
    let minority_count = d.tier(Tier::Minority).len();
    let other_mentions = d.untiered().len();
    let lead = if primary.is_empty() {
        "no diagnosis reached the consensus tier".to_string()
    } else {
        primary
            .iter()
            .map(|(l, _, p)| format!("{l} ({p}%)"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let summary = format!(
        "{lead}; {alternative_count} alternatives, {minority_count} minority, {other_mentions} other mentions"
    );
    SingleVsEnsemble {
        single,
        ensemble: EnsembleView {
            primary,
            alternative_count,
            minority_count,
            other_mentions,
            summary,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biaslens::{analyze, AnalysisConfig};
    use crate::casemodel::{parse_response, render_wire, DiagnosisCandidate};
    use crate::consensus::stratify;
    use crate::registry::CostTier;
    use std::sync::Mutex;

    #[test]
    fn chain_validation() {
        assert_eq!(SynthesizerChain::new(vec![]), Err(ChainError::Empty));
        let e = |r: &str| ChainEntry {
            synthesizer_ref: r.into(),
            timeout_ms: 10,
        };
        assert_eq!(SynthesizerChain::new(vec![e("template"), e("a")]), Err(ChainError::TemplatePlacement));
        assert_eq!(
            SynthesizerChain::new(vec![e("template"), e("template")]),
            Err(ChainError::TemplatePlacement)
        );
        assert!(SynthesizerChain::new(vec![e("a"), e("template")]).is_ok());
        let json = serde_json::to_string(&SynthesizerChain::of(["a"], 5).unwrap()).unwrap();
        assert!(serde_json::from_str::<SynthesizerChain>(&json).is_ok());
        assert!(serde_json::from_str::<SynthesizerChain>(r#"[{"synthesizer_ref":"a","timeout_ms":5}]"#).is_err());
    }

    fn cand(label: &str, codes: &[&str], confidence: f64) -> DiagnosisCandidate {
        DiagnosisCandidate {
            label: label.into(),
            icd10_codes: codes.iter().map(|c| c.to_string()).collect(),
            confidence,
            rank: 1,
            rationale: "r".into(),
        }
    }

    /// Four divergent hypotheses: FMF 13, myocarditis 4, pericarditis 2, anxiety 1.
    pub(crate) fn scenario() -> (ClinicalCase, Vec<ModelResponse>, RegistrySnapshot) {
        let mut models = Vec::new();
        let mut responses = Vec::new();
        let plan: [(&str, usize, Region, DiagnosisCandidate); 4] = [
            ("fmf", 13, Region::China, cand("Familial Mediterranean Fever", &["M04.1", "E85.0"], 0.75)),
            ("myo", 4, Region::US, cand("Viral myocarditis", &["I40.0"], 0.78)),
            ("peri", 2, Region::Europe, cand("Acute pericarditis", &["I30.9"], 0.6)),
            ("anx", 1, Region::Other, cand("Anxiety disorder", &["F41.9"], 0.4)),
        ];
        for (prefix, count, region, c) in plan {
            for i in 0..count {
                let id = format!("{prefix}-{i:02}");
                models.push(ModelDescriptor::new(&id, region, CostTier::Free));
                let text = render_wire(std::slice::from_ref(&c));
                responses.push(parse_response(&text, &id, "c1"));
            }
        }
        responses.push(ModelResponse::failed("slow", "c1", ResponseStatus::Timeout, "timed out"));
        models.push(ModelDescriptor::new("slow", Region::US, CostTier::Paid));
        (ClinicalCase::new("c1", "Fever", "Recurrent fever."), responses, RegistrySnapshot::from_models(models))
    }

    fn config() -> AnalysisConfig {
        crate::assets::analysis_config()
    }

    struct Recorder {
        calls: Mutex<Vec<String>>,
        script: BTreeMap<String, Result<String, String>>,
        stall: Vec<String>,
    }

    #[async_trait]
    impl NarrativePort for Recorder {
        async fn synthesize(&self, r: &str, _req: &SynthesisRequest<'_>) -> Result<String, String> {
            self.calls.lock().unwrap().push(r.to_string());
            if self.stall.iter().any(|s| s == r) {
                std::future::pending::<()>().await;
            }
            self.script.get(r).cloned().unwrap_or(Err("unscripted".into()))
        }
    }

    fn identity() -> RunIdentity {
        RunIdentity {
            run_id: "run-000001".into(),
            generated_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    async fn report_with(chain: &SynthesizerChain, port: &dyn NarrativePort) -> EnsembleReport {
        let (case, responses, registry) = scenario();
        let cfg = config();
        let diff = stratify(&responses, &cfg.synonyms).unwrap();
        let findings = analyze(&case, &responses, &registry, &cfg);
        let inputs = ReportInputs {
            case: &case,
            differential: &diff,
            findings: &findings,
            responses: &responses,
            registry: &registry,
            synonyms: &cfg.synonyms,
        };
        build_report(inputs, chain, port, identity()).await
    }

    #[tokio::test]
    async fn failover_stops_at_first_success() {
        let port = Recorder {
            calls: Mutex::new(vec![]),
            script: BTreeMap::from([("b".to_string(), Ok("narrative from b".to_string()))]),
            stall: vec!["a".into()],
        };
        let chain = SynthesizerChain::of(["a", "b", "c"], 50).unwrap();
        let r = report_with(&chain, &port).await;
        assert_eq!(r.narrative_source, "b");
        assert_eq!(r.narrative, "narrative from b");
        assert_eq!(*port.calls.lock().unwrap(), ["a", "b"]);
        assert_eq!(r.attempts[0].outcome, AttemptOutcome::Timeout);
        assert_eq!(r.attempts[1].outcome, AttemptOutcome::Ok);
    }

    #[tokio::test]
    async fn all_failing_falls_back_to_template() {
        let port = Recorder {
            calls: Mutex::new(vec![]),
            script: BTreeMap::new(),
            stall: vec![],
        };
        let chain = SynthesizerChain::of(["a", "b"], 50).unwrap();
        let r1 = report_with(&chain, &port).await;
        let r2 = report_with(&chain, &port).await;
        assert_eq!(r1.narrative_source, TEMPLATE);
        assert_eq!(r1.narrative, r1.template_narrative);
        assert_eq!(r1.narrative, r2.narrative);
        assert_eq!(r1.attempts.len(), 3);
    }

    #[tokio::test]
    async fn template_lists_all_four_hypotheses_with_regions() {
        let r = report_with(&SynthesizerChain::template_only(), &NoSynthesizer).await;
        let t = &r.template_narrative;
        for key in ["m04", "i40", "i30", "f41"] {
            assert!(t.contains(&format!("[{key}]")), "{key} missing:\n{t}");
        }
        assert!(t.contains("Familial Mediterranean Fever [m04] 65% (13/20 first choices)"));
        assert!(t.contains("flagged by 13 models; regions: China 13"));
        assert!(t.contains("Anxiety disorder [f41] 5%"));
        assert!(t.contains("- slow: Timeout"));
        let consensus = t.find("CONSENSUS").unwrap();
        let alt = t.find("ALTERNATIVES").unwrap();
        let minority = t.find("MINORITY").unwrap();
        assert!(consensus < alt && alt < minority);
        assert!(t[alt..minority].contains("[i30]"));
        assert!(t[minority..].contains("[f41]"));
        assert_eq!(r.provenance.keys().collect::<Vec<_>>(), ["f41", "i30", "i40", "m04"]);
        for p in r.provenance.values().flatten() {
            assert!(RegistrySnapshot::from_models(scenario().2.iter().cloned()).contains(&p.model_id));
        }
    }

    #[tokio::test]
    async fn single_model_view_shows_most_confident_first_choice() {
        let r = report_with(&SynthesizerChain::template_only(), &NoSynthesizer).await;
        let v = single_vs_ensemble_view(&r);
        let single = v.single.unwrap();
        assert_eq!(single.label, "Viral myocarditis");
        assert_eq!(single.confidence, 0.78);
        assert_eq!(single.model_id, "myo-00");
        assert_eq!(v.ensemble.primary[0].1, "m04");
        assert_eq!(v.ensemble.alternative_count, 2);
        assert_eq!(v.ensemble.minority_count, 1);
    }

    #[test]
    fn unanimous_template_marks_empty_sections() {
        let (case, _, _) = scenario();
        let c = cand("Sarcoidosis", &["D86.0"], 0.9);
        let responses: Vec<_> = (0..3)
            .map(|i| parse_response(&render_wire(std::slice::from_ref(&c)), &format!("m{i}"), "c1"))
            .collect();
        let registry = RegistrySnapshot::from_models((0..3).map(|i| ModelDescriptor::new(format!("m{i}"), Region::US, CostTier::Paid)));
        let cfg = config();
        let diff = stratify(&responses, &cfg.synonyms).unwrap();
        let findings = analyze(&case, &responses, &registry, &cfg);
        let t = render_template(&diff, &findings, &registry, &response_statuses(&responses));
        assert_eq!(t.matches("(none)").count(), 3);
        assert!(t.contains("Sarcoidosis [d86] 100%"));
        assert_eq!(t, render_template(&diff, &findings, &registry, &response_statuses(&responses)));
    }
}
