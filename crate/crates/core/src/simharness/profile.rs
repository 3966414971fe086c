//! Generative knobs for one simulated model, and the response generator.
//!
//! A candidate's weight is its prior, multiplied by `case_focus` when the
//! case is tagged with its key, by its regional boost when the case carries
//! the matching `affinity:` tag, and by its temporal boost. Candidates whose
//! weight falls below `cutoff` times the best weight are not listed at all;
//! the rest are ordered by weighted sampling without replacement
//! (Efraimidis–Spirakis keys `ln(u) / w`) and truncated to `top_k`.
//!
//! A case with one strongly indicated diagnosis therefore yields short,
//! agreeing lists, and a case with many plausible diagnoses yields long,
//! divergent ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stream, DiseaseCatalog, SimError};
use crate::biaslens::AnalysisConfig;
use crate::casemodel::{render_wire, ClinicalCase, DiagnosisCandidate};
use crate::consensus::normalize_label;
use crate::registry::Region;

/// Expected phrase counts per response; fractional parts are Bernoulli draws.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Verbosity {
    pub uncertainty_rate: f64,
    pub confidence_rate: f64,
    #[serde(default)]
    pub aggressive_rate: f64,
    #[serde(default)]
    pub conservative_rate: f64,
    /// Restatements of the case's social context.
    #[serde(default)]
    pub anchor_rate: f64,
}

/// Per-attempt probabilities of an injected fault. Sum must not exceed 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultRates {
    #[serde(default)]
    pub timeout: f64,
    #[serde(default)]
    pub network: f64,
    #[serde(default)]
    pub overflow: f64,
    #[serde(default)]
    pub malformed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    Timeout,
    Network,
    Overflow,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModelProfile {
    pub model_id: String,
    pub origin_region: Region,
    pub disease_priors: BTreeMap<String, f64>,
    #[serde(default)]
    pub regional_boost: BTreeMap<String, f64>,
    #[serde(default)]
    pub temporal_boost: BTreeMap<String, f64>,
    pub hallucination_rate: f64,
    pub verbosity: Verbosity,
    pub top_k: usize,
    /// Multiplier for diagnoses the case is tagged with.
    pub case_focus: f64,
    /// Relative weight below which a diagnosis is left off the list.
    pub cutoff: f64,
    pub latency_ms: u64,
    #[serde(default)]
    pub faults: FaultRates,
    pub seed_offset: u64,
}

fn rate_ok(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

fn fraction_ok(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SimModelProfile {
    pub fn validate(&self, catalog: &DiseaseCatalog) -> Result<(), SimError> {
        let bad = |reason: String| {
            Err(SimError::ProfileInvalid {
                model_id: self.model_id.clone(),
                reason,
            })
        };
        if self.disease_priors.values().any(|w| !rate_ok(*w)) {
            return bad("prior weights must be finite and non-negative".into());
        }
        if !self.disease_priors.values().any(|w| *w > 0.0) {
            return bad("at least one prior weight must be positive".into());
        }
        for key in self
            .disease_priors
            .keys()
            .chain(self.regional_boost.keys())
            .chain(self.temporal_boost.keys())
        {
            if !catalog.contains(key) {
                return bad(format!("`{key}` is not in the disease catalog"));
            }
        }
        if self
            .regional_boost
            .values()
            .chain(self.temporal_boost.values())
            .any(|m| !rate_ok(*m))
        {
            return bad("boosts must be finite and non-negative".into());
        }
        if !fraction_ok(self.hallucination_rate) {
            return bad("hallucination_rate must be in [0, 1]".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(rate_ok(self.case_focus) && self.case_focus > 0.0) {
            return bad("case_focus must be positive".into());
        }
        if !fraction_ok(self.cutoff) {
            return bad("cutoff must be in [0, 1]".into());
        }
        let v = &self.verbosity;
        if ![v.uncertainty_rate, v.confidence_rate, v.aggressive_rate, v.conservative_rate, v.anchor_rate]
            .into_iter()
            .all(rate_ok)
        {
            return bad("verbosity rates must be finite and non-negative".into());
        }
        let f = &self.faults;
        let rates = [f.timeout, f.network, f.overflow, f.malformed];
        if !rates.into_iter().all(fraction_ok) || rates.iter().sum::<f64>() > 1.0 {
            return bad("fault rates must be fractions summing to at most 1".into());
        }
        Ok(())
    }

    /// Boosted weights of every positive-prior diagnosis for this case.
    pub fn weights(&self, case: &ClinicalCase, catalog: &DiseaseCatalog) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (key, prior) in &self.disease_priors {
            if *prior <= 0.0 {
                continue;
            }
            let mut w = *prior;
            if case.tags.contains(key) {
                w *= self.case_focus;
            }
            let affinity = catalog.get(key).and_then(|e| e.affinity.as_deref());
            if let Some(a) = affinity {
                if case.tags.contains(&format!("affinity:{a}")) {
                    w *= self.regional_boost.get(key).copied().unwrap_or(1.0);
                }
            }
            w *= self.temporal_boost.get(key).copied().unwrap_or(1.0);
            if w > 0.0 {
                out.insert(key.clone(), w);
            }
        }
        out
    }
}

/// Phrases the generator may emit, taken from the analysis lexicons so that
/// what the simulator writes is exactly what the analysis looks for.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerVocabulary {
    pub uncertainty: Vec<String>,
    pub confidence: Vec<String>,
    pub aggressive: Vec<String>,
    pub conservative: Vec<String>,
}

impl MarkerVocabulary {
    pub fn from_config(config: &AnalysisConfig) -> Self {
        MarkerVocabulary {
            uncertainty: config.uncertainty.phrases().to_vec(),
            confidence: config.confidence.phrases().to_vec(),
            aggressive: config.aggressive.phrases().to_vec(),
            conservative: config.conservative.phrases().to_vec(),
        }
    }
}

/// Generated text plus ground truth that analysis code never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub text: String,
    pub candidates: Vec<DiagnosisCandidate>,
    /// Canonical key of the injected fabrication, if any.
    pub fabricated: Option<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    catalog: DiseaseCatalog,
    vocabulary: MarkerVocabulary,
}

fn draw_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    let whole = rate.floor();
    let extra = rng.random::<f64>() < rate - whole;
    whole as usize + usize::from(extra)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [String]) -> Option<&'a str> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.random_range(0..items.len())].as_str())
    }
}

impl Simulator {
    pub fn new(catalog: DiseaseCatalog, vocabulary: MarkerVocabulary) -> Self {
        Simulator { catalog, vocabulary }
    }

    pub fn catalog(&self) -> &DiseaseCatalog {
        &self.catalog
    }

    /// Deterministic response of `profile` to `case` under `seed`.
    pub fn simulate_response(
        &self,
        profile: &SimModelProfile,
        case: &ClinicalCase,
        seed: u64,
    ) -> Result<SimOutput, SimError> {
        profile.validate(&self.catalog)?;
        if !case.tags.iter().any(|t| profile.disease_priors.get(t).is_some_and(|w| *w > 0.0)) {
            return Err(SimError::CaseNotSupported {
                model_id: profile.model_id.clone(),
                case_id: case.case_id.clone(),
            });
        }
        let offset = profile.seed_offset;
        let weights = self.weighted_order(profile, case, seed);
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut confidences: Vec<f64> = weights
            .iter()
            .map(|(_, w)| round2((0.1 + 0.85 * w / total).clamp(0.05, 0.95)))
            .collect();
        confidences.sort_by(|a, b| b.total_cmp(a));

        let mut candidates: Vec<DiagnosisCandidate> = weights
            .iter()
            .zip(confidences)
            .map(|((key, _), confidence)| {
                let entry = self.catalog.get(key).expect("validated against catalog");
                let rationale = if case.tags.contains(key) {
                    "Fits the presenting features."
                } else {
                    "Considered for completeness."
                };
                DiagnosisCandidate {
                    label: entry.label.clone(),
                    icd10_codes: entry.codes.clone(),
                    confidence,
                    rank: 0,
                    rationale: rationale.into(),
                }
            })
            .collect();

        let mut fabricated = None;
        let mut hrng = stream(seed, offset, &case.case_id, "hallucination");
        if hrng.random::<f64>() < profile.hallucination_rate {
            if let Some(label) = pick(&mut hrng, self.catalog.fabricated()) {
                let at = hrng.random_range(0..=candidates.len());
                let confidence = round2(hrng.random_range(0.1..0.3));
                candidates.insert(
                    at,
                    DiagnosisCandidate {
                        label: label.to_string(),
                        icd10_codes: vec![],
                        confidence,
                        rank: 0,
                        rationale: "Unusual pattern worth excluding.".into(),
                    },
                );
                fabricated = Some(normalize_label(label));
            }
        }
        for (i, c) in candidates.iter_mut().enumerate() {
            c.rank = i as u32 + 1;
        }

        let text = format!("{}\n{}", self.prose(profile, case, seed, &candidates), render_wire(&candidates));
        let mut lrng = stream(seed, offset, &case.case_id, "latency");
        let latency_ms = (profile.latency_ms as f64 * lrng.random_range(0.5..1.5)).round() as u64;
        Ok(SimOutput {
            text,
            candidates,
            fabricated,
            latency_ms,
        })
    }

    /// Listed diagnoses with their weights, in sampled rank order.
    fn weighted_order(&self, profile: &SimModelProfile, case: &ClinicalCase, seed: u64) -> Vec<(String, f64)> {
        let weights = profile.weights(case, &self.catalog);
        let best = weights.values().copied().fold(0.0, f64::max);
        let mut rng = stream(seed, profile.seed_offset, &case.case_id, "rank");
        let mut keyed: Vec<(f64, String, f64)> = weights
            .into_iter()
            .map(|(k, w)| {
                // every weighted key draws, listed or not, so cutoff changes never shift the stream
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / w, k, w)
            })
            .filter(|(_, _, w)| *w >= profile.cutoff * best)
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        keyed.truncate(profile.top_k);
        keyed.into_iter().map(|(_, k, w)| (k, w)).collect()
    }

    fn prose(&self, profile: &SimModelProfile, case: &ClinicalCase, seed: u64, listed: &[DiagnosisCandidate]) -> String {
        let mut rng = stream(seed, profile.seed_offset, &case.case_id, "markers");
        let labels: Vec<String> = listed.iter().map(|c| c.label.clone()).collect();
        let v = &profile.verbosity;
        let mut lines = vec![format!("Differential for case {}.", case.case_id)];
        for _ in 0..draw_count(&mut rng, v.uncertainty_rate) {
            if let (Some(p), Some(l)) = (pick(&mut rng, &self.vocabulary.uncertainty), pick(&mut rng, &labels)) {
                lines.push(format!("Assessment: {p} {l}."));
            }
        }
        for _ in 0..draw_count(&mut rng, v.confidence_rate) {
            if let (Some(p), Some(l)) = (pick(&mut rng, &self.vocabulary.confidence), pick(&mut rng, &labels)) {
                lines.push(format!("Impression: {p} {l}."));
            }
        }
        for _ in 0..draw_count(&mut rng, v.aggressive_rate) {
            if let Some(p) = pick(&mut rng, &self.vocabulary.aggressive) {
                lines.push(format!("Plan: {p}."));
            }
        }
        for _ in 0..draw_count(&mut rng, v.conservative_rate) {
            if let Some(p) = pick(&mut rng, &self.vocabulary.conservative) {
                lines.push(format!("Plan: {p}."));
            }
        }
        let context = case.demographics.social_context.trim();
        if !context.is_empty() {
            for _ in 0..draw_count(&mut rng, v.anchor_rate) {
                lines.push(format!("Context noted: {context}."));
            }
        }
        lines.join("\n")
    }

    /// Fault to inject on this attempt, if any.
    pub fn draw_fault(&self, profile: &SimModelProfile, case: &ClinicalCase, seed: u64, attempt: u32) -> Option<FaultKind> {
        let f = &profile.faults;
        let mut rng = stream(seed, profile.seed_offset, &case.case_id, &format!("faults:{attempt}"));
        let u: f64 = rng.random();
        let mut edge = 0.0;
        for (rate, kind) in [
            (f.timeout, FaultKind::Timeout),
            (f.network, FaultKind::Network),
            (f.overflow, FaultKind::Overflow),
            (f.malformed, FaultKind::Malformed),
        ] {
            edge += rate;
            if u < edge {
                return Some(kind);
            }
        }
        None
    }

    /// Keys a profile can ever emit without fabrication.
    pub fn support(profile: &SimModelProfile) -> BTreeSet<&str> {
        profile
            .disease_priors
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::casemodel::{parse_response, ResponseStatus};
    use crate::consensus::{canonical_key, SynonymTable};

    pub(crate) fn simulator() -> Simulator {
        let catalog = DiseaseCatalog::from_document(crate::assets::CATALOG).unwrap();
        let config = crate::assets::analysis_config();
        Simulator::new(catalog, MarkerVocabulary::from_config(&config))
    }

    pub(crate) fn profile(id: &str, priors: &[(&str, f64)]) -> SimModelProfile {
        SimModelProfile {
            model_id: id.into(),
            origin_region: Region::US,
            disease_priors: priors.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
            regional_boost: BTreeMap::new(),
            temporal_boost: BTreeMap::new(),
            hallucination_rate: 0.0,
            verbosity: Verbosity {
                uncertainty_rate: 1.5,
                confidence_rate: 0.5,
                ..Verbosity::default()
            },
            top_k: 5,
            case_focus: 50.0,
            cutoff: 0.05,
            latency_ms: 1000,
            faults: FaultRates::default(),
            seed_offset: 3,
        }
    }

    fn fmf_case() -> ClinicalCase {
        let mut c = ClinicalCase::new("fmf", "Fever", "Recurrent fever and chest pain.");
        c.tags = ["m04", "i40", "i30", "affinity:mediterranean"].map(String::from).into();
        c
    }

    #[test]
    fn deterministic_text() {
        let sim = simulator();
        let p = profile("a", &[("m04", 1.0), ("i40", 2.0), ("i30", 1.0), ("f41", 1.0)]);
        let a = sim.simulate_response(&p, &fmf_case(), 7).unwrap();
        let b = sim.simulate_response(&p, &fmf_case(), 7).unwrap();
        assert_eq!(a, b);
        let parsed = parse_response(&a.text, "a", "fmf");
        assert_eq!(parsed.status, ResponseStatus::Ok);
        assert_eq!(parsed.candidates, a.candidates);
    }

    #[test]
    fn closed_support_without_hallucination() {
        let sim = simulator();
        let p = profile("a", &[("m04", 1.0), ("i40", 2.0), ("i30", 1.0), ("f41", 1.0), ("j18", 3.0)]);
        let support = Simulator::support(&p);
        for seed in 0..200 {
            let out = sim.simulate_response(&p, &fmf_case(), seed).unwrap();
            assert!(out.fabricated.is_none());
            for c in &out.candidates {
                assert!(support.contains(canonical_key(c, &SynonymTable::new()).as_str()));
            }
        }
    }

    #[test]
    fn hallucination_is_recorded() {
        let sim = simulator();
        let mut p = profile("a", &[("m04", 1.0), ("i40", 1.0)]);
        p.hallucination_rate = 1.0;
        let out = sim.simulate_response(&p, &fmf_case(), 1).unwrap();
        let key = out.fabricated.unwrap();
        assert!(out
            .candidates
            .iter()
            .any(|c| canonical_key(c, &SynonymTable::new()) == key));
        assert!(!sim.catalog().contains(&key));
    }

    #[test]
    fn untagged_case_is_unsupported() {
        let sim = simulator();
        let p = profile("a", &[("g20", 1.0)]);
        assert!(matches!(
            sim.simulate_response(&p, &fmf_case(), 1),
            Err(SimError::CaseNotSupported { .. })
        ));
    }

    #[test]
    fn profile_validation() {
        let cat = simulator().catalog().clone();
        let mut p = profile("a", &[("m04", 0.0)]);
        assert!(p.validate(&cat).is_err());
        p = profile("a", &[("not-a-key", 1.0)]);
        assert!(p.validate(&cat).is_err());
        p = profile("a", &[("m04", 1.0)]);
        p.hallucination_rate = 1.5;
        assert!(p.validate(&cat).is_err());
        p.hallucination_rate = 0.1;
        p.top_k = 0;
        assert!(p.validate(&cat).is_err());
        p.top_k = 1;
        p.faults.network = 0.7;
        p.faults.timeout = 0.7;
        assert!(p.validate(&cat).is_err());
    }

    #[test]
    fn cutoff_keeps_focused_lists_short() {
        let sim = simulator();
        let mut case = ClinicalCase::new("w", "t", "n");
        case.tags = ["e83"].map(String::from).into();
        let priors: Vec<(&str, f64)> = sim.catalog().iter().map(|e| (e.key.as_str(), e.prevalence)).collect();
        let mut p = profile("a", &priors);
        p.cutoff = 0.1;
        let out = sim.simulate_response(&p, &case, 5).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.candidates[0].icd10_codes[0], "E83.01");
    }
}
