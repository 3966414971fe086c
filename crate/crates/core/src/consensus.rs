//! Canonical diagnosis keys, tier stratification and consensus statistics.
//!
//! Every responding model casts exactly one top-1 vote. A diagnosis' share
//! is its top-1 votes over the number of `Ok` responses, and shares map onto
//! three tiers:
//!
//! | tier        | share            |
//! |-------------|------------------|
//! | Primary     | `>= 0.30`        |
//! | Alternative | `[0.10, 0.30)`   |
//! | Minority    | `(0, 0.10)`      |
//!
//! Diagnoses mentioned only below rank 1 carry no tier but stay in the
//! differential: nothing is merged away or dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casemodel::{DiagnosisCandidate, ModelResponse};
use crate::registry::{CostTier, Region, RegistrySnapshot};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("no model returned a usable response")]
    NoResponders,
    #[error("responses span several cases ({0} and {1})")]
    MixedCases(String, String),
    #[error("model {0} appears more than once")]
    DuplicateModel(String),
    #[error("empty input")]
    EmptyInput,
    #[error("model {0} is not in the registry snapshot")]
    UnknownModel(String),
    #[error("synonym table line {line}: {reason}")]
    SynonymSyntax { line: usize, reason: String },
}

/// Lowercases, strips punctuation and collapses whitespace.
///
/// Apostrophes are dropped (`Behçet's` → `behçets`); every other
/// non-alphanumeric character acts as a separator.
pub fn normalize_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut pending_space = false;
    for ch in label.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else if matches!(ch, '\'' | '’' | '`') {
            continue;
        } else {
            pending_space = true;
        }
    }
    out
}

/// Three-character ICD-10 category of a code, e.g. `E85.0` → `E85`.
pub fn icd10_category(code: &str) -> Option<String> {
    let b = code.as_bytes();
    (b.len() >= 3
        && b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && b[2].is_ascii_digit())
    .then(|| code[..3].to_string())
}

/// `alias => canonical` mappings over normalized labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn new() -> Self {
        SynonymTable::default()
    }

    pub fn insert(&mut self, alias: &str, canonical: &str) {
        self.map
            .insert(normalize_label(alias), normalize_label(canonical));
    }

    pub fn lookup(&self, normalized: &str) -> Option<&str> {
        self.map.get(normalized).map(String::as_str)
    }

    /// Every alias that resolves to `key`, in alias order.
    pub fn aliases_for(&self, key: &str) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, v)| v.as_str() == key)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl FromStr for SynonymTable {
    type Err = ConsensusError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut table = SynonymTable::new();
        for (i, (alias, canonical)) in parse_mapping_lines(text)?.into_iter().enumerate() {
            let alias_n = normalize_label(&alias);
            if let Some(prev) = table.map.get(&alias_n) {
                if *prev != normalize_label(&canonical) {
                    return Err(ConsensusError::SynonymSyntax {
                        line: i + 1,
                        reason: format!("alias `{alias}` mapped twice"),
                    });
                }
            }
            table.insert(&alias, &canonical);
        }
        Ok(table)
    }
}

/// Parses the shared `left => right` asset format; `#` starts a comment.
pub fn parse_mapping_lines(text: &str) -> Result<Vec<(String, String)>, ConsensusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (left, right) = line.split_once("=>").ok_or(ConsensusError::SynonymSyntax {
            line: i + 1,
            reason: "expected `alias => canonical`".into(),
        })?;
        let (left, right) = (left.trim(), right.trim());
        if left.is_empty() || right.is_empty() {
            return Err(ConsensusError::SynonymSyntax {
                line: i + 1,
                reason: "empty side".into(),
            });
        }
        out.push((left.to_string(), right.to_string()));
    }
    Ok(out)
}

/// Merge key of a candidate: ICD-10 category of its first code, else the
/// synonym entry of its normalized label, else the normalized label.
pub fn canonical_key(candidate: &DiagnosisCandidate, synonyms: &SynonymTable) -> String {
    if let Some(cat) = candidate.icd10_codes.first().and_then(|c| icd10_category(c)) {
        return cat.to_lowercase();
    }
    let normalized = normalize_label(&candidate.label);
    synonyms
        .lookup(&normalized)
        .map(str::to_string)
        .unwrap_or(normalized)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalDiagnosis {
    pub key: String,
    pub display_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icd10_category: Option<String>,
    pub member_labels: BTreeSet<String>,
}

pub fn canonicalize(candidate: &DiagnosisCandidate, synonyms: &SynonymTable) -> CanonicalDiagnosis {
    CanonicalDiagnosis {
        key: canonical_key(candidate, synonyms),
        display_label: candidate.label.clone(),
        icd10_category: candidate.icd10_codes.first().and_then(|c| icd10_category(c)),
        member_labels: BTreeSet::from([candidate.label.clone()]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Primary,
    Alternative,
    Minority,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Primary, Tier::Alternative, Tier::Minority];

    /// Tier for `votes` out of `denominator`, compared exactly in integers.
    pub fn for_votes(votes: usize, denominator: usize) -> Option<Tier> {
        if votes == 0 || denominator == 0 {
            None
        } else if votes * 10 >= denominator * 3 {
            Some(Tier::Primary)
        } else if votes * 10 >= denominator {
            Some(Tier::Alternative)
        } else {
            Some(Tier::Minority)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Primary => "Primary",
            Tier::Alternative => "Alternative",
            Tier::Minority => "Minority",
        }
    }
}

/// One canonical diagnosis within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialEntry {
    pub diagnosis: CanonicalDiagnosis,
    /// `None` when the key was never anyone's top-1 choice.
    pub tier: Option<Tier>,
    pub share: f64,
    pub top1_count: usize,
    pub any_mention_count: usize,
    /// Models listing the key at any rank.
    pub supporting_models: BTreeSet<String>,
    /// Mean over supporting models of their best-ranked confidence for the key.
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedDifferential {
    pub case_id: String,
    pub diagnoses: BTreeMap<String, DifferentialEntry>,
    /// Top-1 key of every responding model.
    pub votes: BTreeMap<String, String>,
    pub responding_count: usize,
    pub breadth: usize,
}

impl StratifiedDifferential {
    pub fn tiered(&self) -> impl Iterator<Item = (&String, &DifferentialEntry)> {
        self.diagnoses.iter().filter(|(_, e)| e.tier.is_some())
    }

    /// Entries of one tier in display order.
    pub fn tier(&self, tier: Tier) -> Vec<(&String, &DifferentialEntry)> {
        self.ranked()
            .into_iter()
            .filter(|(_, e)| e.tier == Some(tier))
            .collect()
    }

    /// Keys mentioned only below rank 1, in display order.
    pub fn untiered(&self) -> Vec<(&String, &DifferentialEntry)> {
        self.ranked()
            .into_iter()
            .filter(|(_, e)| e.tier.is_none())
            .collect()
    }

    /// All entries ordered by (top1 desc, mean confidence desc, key asc).
    pub fn ranked(&self) -> Vec<(&String, &DifferentialEntry)> {
        let mut v: Vec<_> = self.diagnoses.iter().collect();
        v.sort_by(|(ka, a), (kb, b)| {
            b.top1_count
                .cmp(&a.top1_count)
                .then(b.mean_confidence.total_cmp(&a.mean_confidence))
                .then(ka.cmp(kb))
        });
        v
    }

    pub fn leading(&self) -> Option<(&String, &DifferentialEntry)> {
        self.ranked().into_iter().next().filter(|(_, e)| e.top1_count > 0)
    }

    pub fn keys(&self) -> BTreeSet<String> {
        self.diagnoses.keys().cloned().collect()
    }

    pub fn models(&self) -> impl Iterator<Item = &String> {
        self.votes.keys()
    }
}

/// Partitions one case's responses into tiers.
pub fn stratify(
    responses: &[ModelResponse],
    synonyms: &SynonymTable,
) -> Result<StratifiedDifferential, ConsensusError> {
    let mut case_id: Option<&str> = None;
    let mut seen = BTreeSet::new();
    for r in responses {
        match case_id {
            None => case_id = Some(&r.case_id),
            Some(c) if c != r.case_id => {
                return Err(ConsensusError::MixedCases(c.to_string(), r.case_id.clone()))
            }
            _ => {}
        }
        if !seen.insert(r.model_id.as_str()) {
            return Err(ConsensusError::DuplicateModel(r.model_id.clone()));
        }
    }

    struct Acc {
        top1: usize,
        confidences: Vec<f64>,
        models: BTreeSet<String>,
        labels: BTreeMap<String, usize>,
        category: Option<String>,
    }

    // model-id order keeps float sums and first-seen codes independent of input order
    let mut ordered: Vec<&ModelResponse> = responses.iter().filter(|r| r.is_ok() && !r.candidates.is_empty()).collect();
    ordered.sort_by(|a, b| a.model_id.cmp(&b.model_id));

    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut votes = BTreeMap::new();
    for r in ordered {
        let mut keys_for_model = BTreeSet::new();
        for (i, c) in r.candidates.iter().enumerate() {
            let key = canonical_key(c, synonyms);
            let entry = acc.entry(key.clone()).or_insert_with(|| Acc {
                top1: 0,
                confidences: Vec::new(),
                models: BTreeSet::new(),
                labels: BTreeMap::new(),
                category: None,
            });
            *entry.labels.entry(c.label.clone()).or_default() += 1;
            if entry.category.is_none() {
                entry.category = c.icd10_codes.first().and_then(|c| icd10_category(c));
            }
            if i == 0 {
                entry.top1 += 1;
                votes.insert(r.model_id.clone(), key.clone());
            }
            if keys_for_model.insert(key) {
                entry.models.insert(r.model_id.clone());
                entry.confidences.push(c.confidence);
            }
        }
    }

    let responding = votes.len();
    if responding == 0 {
        return Err(ConsensusError::NoResponders);
    }
    let diagnoses = acc
        .into_iter()
        .map(|(key, a)| {
            let display_label = a
                .labels
                .iter()
                .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
                .map(|(l, _)| l.clone())
                .unwrap_or_default();
            let mean_confidence = a.confidences.iter().sum::<f64>() / a.confidences.len() as f64;
            let entry = DifferentialEntry {
                diagnosis: CanonicalDiagnosis {
                    key: key.clone(),
                    display_label,
                    icd10_category: a.category,
                    member_labels: a.labels.into_keys().collect(),
                },
                tier: Tier::for_votes(a.top1, responding),
                share: a.top1 as f64 / responding as f64,
                top1_count: a.top1,
                any_mention_count: a.models.len(),
                supporting_models: a.models,
                mean_confidence,
            };
            (key, entry)
        })
        .collect::<BTreeMap<_, _>>();
    Ok(StratifiedDifferential {
        case_id: case_id.unwrap_or_default().to_string(),
        breadth: diagnoses.len(),
        diagnoses,
        votes,
        responding_count: responding,
    })
}

/// Top-1 share of the leading diagnosis.
pub fn consensus_rate(diff: &StratifiedDifferential) -> f64 {
    diff.diagnoses
        .values()
        .map(|e| e.share)
        .fold(0.0, f64::max)
}

/// Leading top-1 count; with `responding_count` it gives the exact rate.
pub fn leading_votes(diff: &StratifiedDifferential) -> usize {
    diff.diagnoses.values().map(|e| e.top1_count).max().unwrap_or(0)
}

/// `numerator / denominator` as an integer percentage, rounded half up.
pub fn percent_half_up(numerator: usize, denominator: usize) -> u32 {
    assert!(denominator > 0, "percentage of an empty denominator");
    ((200 * numerator + denominator) / (2 * denominator)) as u32
}

/// Rounds a fraction to a percentage with `decimals` places, half up.
pub fn round_percent(fraction: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    // nudge by a few ulps so exact ties written in decimal round upward
    ((fraction * 100.0 * scale) * (1.0 + 4.0 * f64::EPSILON) + 0.5).floor() / scale
}

pub fn diagnostic_breadth(diff: &StratifiedDifferential) -> usize {
    diff.breadth
}

/// Number of keys in the Alternative tier.
pub fn alternative_tier_count(diff: &StratifiedDifferential) -> usize {
    diff.tiered()
        .filter(|(_, e)| e.tier == Some(Tier::Alternative))
        .count()
}

/// Number of keys mentioned at any rank that are not Primary.
pub fn non_primary_count(diff: &StratifiedDifferential) -> usize {
    diff.diagnoses
        .values()
        .filter(|e| e.tier != Some(Tier::Primary))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreadthStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

pub fn breadth_stats<'a>(
    runs: impl IntoIterator<Item = &'a StratifiedDifferential>,
) -> Result<BreadthStats, ConsensusError> {
    let breadths: Vec<usize> = runs.into_iter().map(|d| d.breadth).collect();
    if breadths.is_empty() {
        return Err(ConsensusError::EmptyInput);
    }
    Ok(BreadthStats {
        mean: breadths.iter().sum::<usize>() as f64 / breadths.len() as f64,
        min: *breadths.iter().min().unwrap(),
        max: *breadths.iter().max().unwrap(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParticipationCategory {
    High,
    Moderate,
    Low,
}

impl ParticipationCategory {
    pub fn for_counts(hits: usize, cases: usize) -> Self {
        if hits * 10 >= cases * 6 {
            ParticipationCategory::High
        } else if hits * 10 >= cases * 3 {
            ParticipationCategory::Moderate
        } else {
            ParticipationCategory::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParticipation {
    pub model_id: String,
    pub cases_counted: usize,
    pub primary_tier_hits: usize,
    pub participation_rate: f64,
    pub category: ParticipationCategory,
}

/// How often each model's top-1 choice landed in a Primary tier.
///
/// Only runs in which the model responded are counted; sorted by rate
/// descending, then model id.
pub fn model_participation<'a>(
    runs: impl IntoIterator<Item = &'a StratifiedDifferential>,
) -> Vec<ModelParticipation> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for diff in runs {
        for (model, key) in &diff.votes {
            let slot = counts.entry(model.as_str()).or_default();
            slot.0 += 1;
            if diff.diagnoses.get(key).and_then(|e| e.tier) == Some(Tier::Primary) {
                slot.1 += 1;
            }
        }
    }
    let mut out: Vec<ModelParticipation> = counts
        .into_iter()
        .filter(|(_, (cases, _))| *cases > 0)
        .map(|(model, (cases, hits))| ModelParticipation {
            model_id: model.to_string(),
            cases_counted: cases,
            primary_tier_hits: hits,
            participation_rate: hits as f64 / cases as f64,
            category: ParticipationCategory::for_counts(hits, cases),
        })
        .collect();
    out.sort_by(|a, b| {
        b.participation_rate
            .total_cmp(&a.participation_rate)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub by_cost_tier: BTreeMap<CostTier, f64>,
    pub by_region: BTreeMap<Region, f64>,
}

/// Unweighted mean participation rate per cost tier and per region.
pub fn cohort_comparison(
    participations: &[ModelParticipation],
    registry: &RegistrySnapshot,
) -> Result<CohortComparison, ConsensusError> {
    let mut tiers: BTreeMap<CostTier, Vec<f64>> = BTreeMap::new();
    let mut regions: BTreeMap<Region, Vec<f64>> = BTreeMap::new();
    for p in participations {
        let d = registry
            .get(&p.model_id)
            .ok_or_else(|| ConsensusError::UnknownModel(p.model_id.clone()))?;
        tiers.entry(d.cost_tier).or_default().push(p.participation_rate);
        regions.entry(d.origin_region).or_default().push(p.participation_rate);
    }
    fn mean(v: Vec<f64>) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }
    Ok(CohortComparison {
        by_cost_tier: tiers.into_iter().map(|(k, v)| (k, mean(v))).collect(),
        by_region: regions.into_iter().map(|(k, v)| (k, mean(v))).collect(),
    })
}
