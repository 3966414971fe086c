//! Lexical marker analysis and bias attribution over one run's responses.
//!
//! Text and phrases are normalized like diagnosis labels (lowercase,
//! punctuation as word separators), so `follow-up` matches `follow up` and
//! `COVID-19` matches `covid 19`. Matching is aligned on word boundaries and
//! greedy longest-match without overlap: with both `cannot rule out` and
//! `rule out` in a lexicon, `cannot rule out X` is one hit.
//!
//! Rates (mentions per model, anchoring, treatment split) use `Ok` responses
//! as the denominator. Marker totals also read the raw text of malformed
//! outputs, since that text is still what the model said.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casemodel::{prose, ClinicalCase, ModelResponse, ResponseStatus};
use crate::consensus::{
    canonical_key, icd10_category, normalize_label, parse_mapping_lines, ConsensusError, SynonymTable,
};
use crate::registry::{Region, RegistrySnapshot};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("lexicon `{0}` has no phrases")]
    Empty(String),
    #[error("lexicon `{name}` lists `{phrase}` twice")]
    Duplicate { name: String, phrase: String },
    #[error("lexicon `{name}`: `{longer}` must be listed before its sub-phrase `{shorter}`")]
    Order {
        name: String,
        shorter: String,
        longer: String,
    },
    #[error("lexicon asset: {0}")]
    Asset(#[from] ConsensusError),
    #[error("lexicon asset is missing group `{0}`")]
    MissingGroup(String),
}

fn normalize_phrase(s: &str) -> String {
    normalize_label(s)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Ordered phrase list. Multi-word phrases precede their sub-phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLexicon", into = "RawLexicon")]
pub struct MarkerLexicon {
    name: String,
    phrases: Vec<String>,
    #[serde(skip)]
    compiled: Vec<Vec<char>>,
}

#[derive(Serialize, Deserialize)]
struct RawLexicon {
    name: String,
    phrases: Vec<String>,
}

impl TryFrom<RawLexicon> for MarkerLexicon {
    type Error = LexiconError;

    fn try_from(raw: RawLexicon) -> Result<Self, Self::Error> {
        MarkerLexicon::new(raw.name, raw.phrases)
    }
}

impl From<MarkerLexicon> for RawLexicon {
    fn from(l: MarkerLexicon) -> Self {
        RawLexicon {
            name: l.name,
            phrases: l.phrases,
        }
    }
}

impl MarkerLexicon {
    pub fn new<S: AsRef<str>>(
        name: impl Into<String>,
        phrases: impl IntoIterator<Item = S>,
    ) -> Result<Self, LexiconError> {
        let name = name.into();
        let phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| normalize_phrase(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(LexiconError::Empty(name));
        }
        let mut seen = BTreeSet::new();
        for p in &phrases {
            if !seen.insert(p) {
                return Err(LexiconError::Duplicate {
                    name,
                    phrase: p.clone(),
                });
            }
        }
        for (i, earlier) in phrases.iter().enumerate() {
            for later in &phrases[i + 1..] {
                if later.len() > earlier.len() && !find_spans(later, &[chars(earlier)]).is_empty() {
                    return Err(LexiconError::Order {
                        name,
                        shorter: earlier.clone(),
                        longer: later.clone(),
                    });
                }
            }
        }
        let compiled = phrases.iter().map(|p| chars(p)).collect();
        Ok(MarkerLexicon {
            name,
            phrases,
            compiled,
        })
    }

    /// Builds a lexicon after sorting phrases longest first.
    pub fn sorted<S: AsRef<str>>(
        name: impl Into<String>,
        phrases: impl IntoIterator<Item = S>,
    ) -> Result<Self, LexiconError> {
        let mut v: Vec<String> = phrases.into_iter().map(|p| normalize_phrase(p.as_ref())).collect();
        v.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        v.dedup();
        MarkerLexicon::new(name, v)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    fn compiled(&self) -> std::borrow::Cow<'_, [Vec<char>]> {
        if self.compiled.len() == self.phrases.len() {
            std::borrow::Cow::Borrowed(&self.compiled)
        } else {
            std::borrow::Cow::Owned(self.phrases.iter().map(|p| chars(p)).collect())
        }
    }
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

/// Non-overlapping match spans (char offsets into the normalized text).
fn find_spans(normalized: &str, phrases: &[Vec<char>]) -> Vec<(usize, usize)> {
    let text: Vec<char> = normalized.chars().collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let starts_word = i == 0 || !is_word_char(text[i - 1]);
        let mut best: Option<usize> = None;
        if starts_word {
            for p in phrases {
                let end = i + p.len();
                if end <= text.len()
                    && text[i..end] == p[..]
                    && (end == text.len() || !is_word_char(text[end]))
                    && best.is_none_or(|b| end > b)
                {
                    best = Some(end);
                }
            }
        }
        match best {
            Some(end) => {
                spans.push((i, end));
                i = end;
            }
            None => i += 1,
        }
    }
    spans
}

/// Occurrences of lexicon phrases in `text`.
pub fn count_markers(text: &str, lexicon: &MarkerLexicon) -> usize {
    if text.is_empty() {
        return 0;
    }
    find_spans(&normalize_phrase(text), &lexicon.compiled()).len()
}

/// A diagnosis tracked by canonical key plus free-text aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub key: String,
    pub lexicon: Option<MarkerLexicon>,
}

impl Term {
    /// Aliases come from the synonym table; a non-code key is its own alias.
    pub fn from_synonyms(key: &str, synonyms: &SynonymTable) -> Term {
        let mut phrases: Vec<String> = synonyms.aliases_for(key).into_iter().map(str::to_string).collect();
        if icd10_category(&key.to_uppercase()).is_none() || key.len() != 3 {
            phrases.push(key.to_string());
        }
        Term {
            key: key.to_string(),
            lexicon: MarkerLexicon::sorted(key, phrases).ok(),
        }
    }

    /// Mentions in one response: candidates at any rank whose key matches,
    /// plus alias hits in the prose around the structured block.
    pub fn mentions(&self, response: &ModelResponse, synonyms: &SynonymTable) -> usize {
        let structured = response
            .candidates
            .iter()
            .filter(|c| canonical_key(c, synonyms) == self.key)
            .count();
        let prose_hits = self
            .lexicon
            .as_ref()
            .map_or(0, |l| count_markers(&prose(&response.raw_text), l));
        structured + prose_hits
    }
}

fn ok_responses(responses: &[ModelResponse]) -> impl Iterator<Item = &ModelResponse> {
    responses.iter().filter(|r| r.status == ResponseStatus::Ok)
}

/// Mean mentions of `term` per responding model, per origin region.
///
/// Models missing from the snapshot are ignored.
pub fn regional_mention_rate(
    responses: &[ModelResponse],
    registry: &RegistrySnapshot,
    term: &Term,
    synonyms: &SynonymTable,
) -> BTreeMap<Region, f64> {
    let mut acc: BTreeMap<Region, (usize, usize)> = BTreeMap::new();
    for r in ok_responses(responses) {
        let Some(region) = registry.region_of(&r.model_id) else {
            continue;
        };
        let slot = acc.entry(region).or_default();
        slot.0 += term.mentions(r, synonyms);
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|(region, (mentions, n))| (region, mentions as f64 / n as f64))
        .collect()
}

/// Lexicon hits per responding model, per anchor term.
pub fn demographic_anchoring(
    responses: &[ModelResponse],
    case: &ClinicalCase,
    anchor_lexicons: &BTreeMap<String, MarkerLexicon>,
) -> BTreeMap<String, f64> {
    let ok: Vec<&ModelResponse> = ok_responses(responses)
        .filter(|r| r.case_id == case.case_id)
        .collect();
    anchor_lexicons
        .iter()
        .map(|(term, lexicon)| {
            let hits: usize = ok.iter().map(|r| count_markers(&r.raw_text, lexicon)).sum();
            let rate = if ok.is_empty() { 0.0 } else { hits as f64 / ok.len() as f64 };
            (term.clone(), rate)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentSplit {
    pub aggressive: usize,
    pub conservative: usize,
    pub unclassified: usize,
}

/// Lexicon vote per responding model; ties (including 0–0) are unclassified.
pub fn treatment_split(
    responses: &[ModelResponse],
    aggressive: &MarkerLexicon,
    conservative: &MarkerLexicon,
) -> TreatmentSplit {
    let mut split = TreatmentSplit::default();
    for r in ok_responses(responses) {
        let a = count_markers(&r.raw_text, aggressive);
        let c = count_markers(&r.raw_text, conservative);
        match a.cmp(&c) {
            std::cmp::Ordering::Greater => split.aggressive += 1,
            std::cmp::Ordering::Less => split.conservative += 1,
            std::cmp::Ordering::Equal => split.unclassified += 1,
        }
    }
    split
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermTally {
    pub total_mentions: usize,
    /// Runs with at least one mention.
    pub cases_present: usize,
}

/// Cross-case mention totals for watched terms. Unmentioned terms report 0.
pub fn temporal_flags(
    runs: &[&[ModelResponse]],
    watchlist: &[Term],
    synonyms: &SynonymTable,
) -> BTreeMap<String, TermTally> {
    watchlist
        .iter()
        .map(|term| {
            let mut tally = TermTally::default();
            for run in runs {
                let n: usize = ok_responses(run).map(|r| term.mentions(r, synonyms)).sum();
                tally.total_mentions += n;
                tally.cases_present += usize::from(n > 0);
            }
            (term.key.clone(), tally)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerCounts {
    pub uncertainty: usize,
    pub confidence: usize,
}

/// Lexicons and term lists that drive the analysis. Stored with each run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub synonyms: SynonymTable,
    pub uncertainty: MarkerLexicon,
    pub confidence: MarkerLexicon,
    pub aggressive: MarkerLexicon,
    pub conservative: MarkerLexicon,
    pub anchors: BTreeMap<String, MarkerLexicon>,
    /// Terms whose mentions are broken down by model region.
    pub regional_terms: Vec<String>,
    /// Terms tracked across cases for temporal patterns.
    pub watchlist: Vec<String>,
}

pub const ANCHOR_PREFIX: &str = "anchor:";

impl AnalysisConfig {
    /// Builds a config from the `phrase => group` lexicon asset.
    ///
    /// Required groups: `uncertainty`, `confidence`, `aggressive`,
    /// `conservative`; `anchor:<term>` groups become anchoring lexicons.
    pub fn from_assets(
        synonyms: SynonymTable,
        lexicons: &str,
        regional_terms: Vec<String>,
        watchlist: Vec<String>,
    ) -> Result<Self, LexiconError> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (phrase, group) in parse_mapping_lines(lexicons)? {
            groups.entry(group.trim().to_lowercase()).or_default().push(phrase);
        }
        let mut take = |name: &str| -> Result<MarkerLexicon, LexiconError> {
            let phrases = groups
                .remove(name)
                .ok_or_else(|| LexiconError::MissingGroup(name.to_string()))?;
            MarkerLexicon::new(name, phrases)
        };
        let uncertainty = take("uncertainty")?;
        let confidence = take("confidence")?;
        let aggressive = take("aggressive")?;
        let conservative = take("conservative")?;
        let mut anchors = BTreeMap::new();
        for (group, phrases) in groups {
            if let Some(term) = group.strip_prefix(ANCHOR_PREFIX) {
                anchors.insert(term.to_string(), MarkerLexicon::new(term, phrases)?);
            }
        }
        Ok(AnalysisConfig {
            synonyms,
            uncertainty,
            confidence,
            aggressive,
            conservative,
            anchors,
            regional_terms,
            watchlist,
        })
    }

    pub fn term(&self, key: &str) -> Term {
        Term::from_synonyms(key, &self.synonyms)
    }

    pub fn watch_terms(&self) -> Vec<Term> {
        self.watchlist.iter().map(|k| self.term(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFindings {
    pub case_id: String,
    pub uncertainty_count: usize,
    pub confidence_count: usize,
    pub per_model_counts: BTreeMap<String, MarkerCounts>,
    /// term key → region → mentions per responding model.
    pub mentions_per_model_by_region: BTreeMap<String, BTreeMap<Region, f64>>,
    pub demographic_anchoring: BTreeMap<String, f64>,
    pub treatment_split: TreatmentSplit,
    /// Watched term → mentions in this run.
    pub watch_mentions: BTreeMap<String, usize>,
}

/// Runs every lexical and attribution analysis for one case.
pub fn analyze(
    case: &ClinicalCase,
    responses: &[ModelResponse],
    registry: &RegistrySnapshot,
    config: &AnalysisConfig,
) -> BiasFindings {
    let mut per_model_counts = BTreeMap::new();
    for r in responses.iter().filter(|r| !r.raw_text.is_empty()) {
        per_model_counts.insert(
            r.model_id.clone(),
            MarkerCounts {
                uncertainty: count_markers(&r.raw_text, &config.uncertainty),
                confidence: count_markers(&r.raw_text, &config.confidence),
            },
        );
    }
    let mentions_per_model_by_region = config
        .regional_terms
        .iter()
        .map(|k| {
            (
                k.clone(),
                regional_mention_rate(responses, registry, &config.term(k), &config.synonyms),
            )
        })
        .collect();
    let watch_mentions = config
        .watch_terms()
        .iter()
        .map(|t| {
            (
                t.key.clone(),
                ok_responses(responses).map(|r| t.mentions(r, &config.synonyms)).sum(),
            )
        })
        .collect();
    BiasFindings {
        case_id: case.case_id.clone(),
        uncertainty_count: per_model_counts.values().map(|c| c.uncertainty).sum(),
        confidence_count: per_model_counts.values().map(|c| c.confidence).sum(),
        per_model_counts,
        mentions_per_model_by_region,
        demographic_anchoring: demographic_anchoring(responses, case, &config.anchors),
        treatment_split: treatment_split(responses, &config.aggressive, &config.conservative),
        watch_mentions,
    }
}
