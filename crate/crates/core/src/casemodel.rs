//! Clinical cases, model responses and diagnosis candidates.
//!
//! Providers are asked to answer with a fenced `diagnoses` block holding a
//! JSON array of `{label, codes, confidence, rationale}` objects. Any prose
//! around the block is kept verbatim in [`ModelResponse::raw_text`] so the
//! lexical analysis can still see it. Parsing never fails: structural
//! problems become [`ResponseStatus::MalformedOutput`] with diagnostics.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const CASE_SCHEMA_VERSION: u32 = 1;

/// Info string of the fenced block that carries structured candidates.
pub const WIRE_FENCE: &str = "diagnoses";

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("invalid case field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("duplicate case id: {0}")]
    DuplicateId(String),
    #[error("case io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, reason: impl Into<String>) -> CaseError {
    CaseError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default)]
    pub origin: String,
    #[serde(default)]
    pub social_context: String,
}

/// Reference diagnosis shipped with a fixture case. Informational only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDiagnosis {
    pub label: String,
    #[serde(default)]
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalCase {
    pub case_id: String,
    pub title: String,
    pub narrative: String,
    #[serde(default)]
    pub demographics: Demographics,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceDiagnosis>,
}

impl ClinicalCase {
    pub fn new(case_id: impl Into<String>, title: impl Into<String>, narrative: impl Into<String>) -> Self {
        ClinicalCase {
            case_id: case_id.into(),
            title: title.into(),
            narrative: narrative.into(),
            demographics: Demographics::default(),
            tags: BTreeSet::new(),
            reference: None,
        }
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        if self.case_id.is_empty()
            || !self
                .case_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(invalid("case_id", "must be non-empty ASCII [A-Za-z0-9._-]"));
        }
        if self.narrative.trim().is_empty() {
            return Err(invalid("narrative", "must not be empty"));
        }
        if let Some(age) = self.demographics.age {
            if age > 130 {
                return Err(invalid("demographics.age", format!("{age} outside [0, 130]")));
            }
        }
        if let Some(reference) = &self.reference {
            if let Some(bad) = reference.codes.iter().find(|c| !validate_icd10(c)) {
                return Err(invalid("reference.codes", format!("`{bad}` is not an ICD-10 code")));
            }
        }
        Ok(())
    }

    pub fn from_document(text: &str) -> Result<Self, CaseError> {
        let doc: CaseDocument =
            toml::from_str(text).map_err(|e| invalid("document", e.message().to_string()))?;
        if doc.schema_version != CASE_SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}", doc.schema_version),
            ));
        }
        doc.case.validate()?;
        Ok(doc.case)
    }

    pub fn to_document(&self) -> String {
        toml::to_string(&CaseDocument {
            schema_version: CASE_SCHEMA_VERSION,
            case: self.clone(),
        })
        .expect("case serializes to toml")
    }
}

#[derive(Serialize, Deserialize)]
struct CaseDocument {
    schema_version: u32,
    #[serde(flatten)]
    case: ClinicalCase,
}

/// Directory of case documents, one `<case_id>.toml` per case.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    dir: PathBuf,
}

impl CaseBundle {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CaseBundle { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// All cases ordered by id.
    pub fn load(&self) -> Result<Vec<ClinicalCase>, CaseError> {
        let io = |source| CaseError::Io {
            path: self.dir.clone(),
            source,
        };
        if !self.dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut cases: Vec<ClinicalCase> = Vec::with_capacity(paths.len());
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|source| CaseError::Io {
                path: path.clone(),
                source,
            })?;
            cases.push(ClinicalCase::from_document(&text)?);
        }
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        if let Some(w) = cases.windows(2).find(|w| w[0].case_id == w[1].case_id) {
            return Err(CaseError::DuplicateId(w[0].case_id.clone()));
        }
        Ok(cases)
    }

    pub fn get(&self, case_id: &str) -> Result<Option<ClinicalCase>, CaseError> {
        Ok(self.load()?.into_iter().find(|c| c.case_id == case_id))
    }

    /// Adds a case; existing case files are never overwritten.
    pub fn add(&self, case: &ClinicalCase) -> Result<(), CaseError> {
        use std::io::Write;
        case.validate()?;
        fs::create_dir_all(&self.dir).map_err(|source| CaseError::Io {
            path: self.dir.clone(),
            source,
        })?;
        let path = self.dir.join(format!("{}.toml", case.case_id));
        let mut file = match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CaseError::DuplicateId(case.case_id.clone()))
            }
            Err(source) => return Err(CaseError::Io { path, source }),
        };
        file.write_all(case.to_document().as_bytes())
            .map_err(|source| CaseError::Io { path, source })
    }
}

/// `true` iff `code` is one uppercase letter, two digits, and optionally a
/// dot followed by 1–4 uppercase letters or digits.
pub fn validate_icd10(code: &str) -> bool {
    let b = code.as_bytes();
    if b.len() < 3 || !b[0].is_ascii_uppercase() || !b[1].is_ascii_digit() || !b[2].is_ascii_digit() {
        return false;
    }
    match &b[3..] {
        [] => true,
        [b'.', rest @ ..] => {
            (1..=4).contains(&rest.len())
                && rest
                    .iter()
                    .all(|c| c.is_ascii_digit() || c.is_ascii_uppercase())
        }
        _ => false,
    }
}

/// Brings a confidence value onto the canonical `[0, 1]` scale.
///
/// Values in `(1, 100]` are read as percentages. Anything else outside
/// `[0, 1]` is rejected.
pub fn normalize_confidence(value: f64) -> Option<f64> {
    if !value.is_finite() || value < 0.0 {
        None
    } else if value <= 1.0 {
        Some(value)
    } else if value <= 100.0 {
        Some(value / 100.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisCandidate {
    pub label: String,
    pub icd10_codes: Vec<String>,
    pub confidence: f64,
    pub rank: u32,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResponseStatus {
    Ok,
    Timeout,
    ProviderError,
    TokenOverflow,
    MalformedOutput,
}

impl ResponseStatus {
    pub const ALL: [ResponseStatus; 5] = [
        ResponseStatus::Ok,
        ResponseStatus::Timeout,
        ResponseStatus::ProviderError,
        ResponseStatus::TokenOverflow,
        ResponseStatus::MalformedOutput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseStatus::Ok => "Ok",
            ResponseStatus::Timeout => "Timeout",
            ResponseStatus::ProviderError => "ProviderError",
            ResponseStatus::TokenOverflow => "TokenOverflow",
            ResponseStatus::MalformedOutput => "MalformedOutput",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub model_id: String,
    pub case_id: String,
    pub status: ResponseStatus,
    pub candidates: Vec<DiagnosisCandidate>,
    pub raw_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl ModelResponse {
    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }

    /// A response that carries no model output (timeouts, transport errors).
    pub fn failed(
        model_id: impl Into<String>,
        case_id: impl Into<String>,
        status: ResponseStatus,
        detail: impl Into<String>,
    ) -> Self {
        debug_assert_ne!(status, ResponseStatus::Ok);
        ModelResponse {
            model_id: model_id.into(),
            case_id: case_id.into(),
            status,
            candidates: Vec::new(),
            raw_text: String::new(),
            latency_ms: 0,
            diagnostics: vec![detail.into()],
        }
    }

    pub fn top1(&self) -> Option<&DiagnosisCandidate> {
        self.candidates.first()
    }
}

/// Parses provider output into a response. Total: every input yields a value.
pub fn parse_response(raw_text: &str, model_id: &str, case_id: &str) -> ModelResponse {
    let mut response = ModelResponse {
        model_id: model_id.to_string(),
        case_id: case_id.to_string(),
        status: ResponseStatus::MalformedOutput,
        candidates: Vec::new(),
        raw_text: raw_text.to_string(),
        latency_ms: 0,
        diagnostics: Vec::new(),
    };
    match parse_candidates(raw_text) {
        Ok(candidates) => {
            response.status = ResponseStatus::Ok;
            response.candidates = candidates;
        }
        Err(diagnostics) => response.diagnostics = diagnostics,
    }
    response
}

fn parse_candidates(raw: &str) -> Result<Vec<DiagnosisCandidate>, Vec<String>> {
    if raw.trim().is_empty() {
        return Err(vec!["empty output".to_string()]);
    }
    let block = extract_block(raw).ok_or_else(|| vec!["no fenced diagnoses block found".to_string()])?;
    let value: Value = serde_json::from_str(block)
        .map_err(|e| vec![format!("diagnoses block is not valid JSON: {e}")])?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(mut obj) => match obj.remove("diagnoses") {
            Some(Value::Array(items)) => items,
            _ => return Err(vec!["expected a JSON array of candidates".to_string()]),
        },
        _ => return Err(vec!["expected a JSON array of candidates".to_string()]),
    };
    if items.is_empty() {
        return Err(vec!["diagnoses block lists no candidates".to_string()]);
    }

    let mut problems = Vec::new();
    let mut parsed: Vec<(Option<u64>, DiagnosisCandidate)> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match parse_candidate(item) {
            Ok(c) => parsed.push(c),
            Err(msg) => problems.push(format!("candidate {}: {msg}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(problems);
    }

    let explicit = parsed.iter().filter(|(r, _)| r.is_some()).count();
    if explicit == 0 {
        for (i, (_, c)) in parsed.iter_mut().enumerate() {
            c.rank = i as u32 + 1;
        }
    } else if explicit == parsed.len() {
        parsed.sort_by_key(|(r, _)| r.unwrap_or(0));
        for (i, (r, c)) in parsed.iter_mut().enumerate() {
            if *r != Some(i as u64 + 1) {
                return Err(vec![format!(
                    "ranks must be 1..{} without gaps or duplicates",
                    items.len()
                )]);
            }
            c.rank = i as u32 + 1;
        }
    } else {
        return Err(vec!["rank given for some candidates but not all".to_string()]);
    }
    Ok(parsed.into_iter().map(|(_, c)| c).collect())
}

fn parse_candidate(item: &Value) -> Result<(Option<u64>, DiagnosisCandidate), String> {
    let obj = item.as_object().ok_or("not an object")?;
    let label = obj
        .get("label")
        .or_else(|| obj.get("diagnosis"))
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or("missing label")?
        .to_string();
    let codes = match obj.get("codes").or_else(|| obj.get("icd10_codes")) {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s.trim().to_string()],
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| x.as_str().map(|s| s.trim().to_string()).ok_or("code is not a string"))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err("codes must be a list of strings".into()),
    };
    if let Some(bad) = codes.iter().find(|c| !validate_icd10(c)) {
        return Err(format!("code `{bad}` does not match the ICD-10 pattern"));
    }
    let confidence = match obj.get("confidence") {
        Some(Value::Number(n)) => n.as_f64().and_then(normalize_confidence),
        Some(Value::String(s)) => {
            let s = s.trim();
            match s.strip_suffix('%') {
                Some(pct) => pct
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| (0.0..=100.0).contains(v))
                    .map(|v| v / 100.0),
                None => s.parse::<f64>().ok().and_then(normalize_confidence),
            }
        }
        _ => return Err("missing confidence".into()),
    }
    .ok_or("confidence outside [0,1] and [0,100]")?;
    let rank = match obj.get("rank") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().filter(|r| *r >= 1).ok_or("rank must be a positive integer")?),
    };
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((
        rank,
        DiagnosisCandidate {
            label,
            icd10_codes: codes,
            confidence,
            rank: 0,
            rationale,
        },
    ))
}

/// Byte ranges of the structured block: (body, whole fence including markers).
///
/// Picks the first ```` ```diagnoses ```` fence, falling back to the first
/// ```` ```json ```` fence.
fn locate_block(raw: &str) -> Option<(Range<usize>, Range<usize>)> {
    let mut fallback = None;
    let mut offset = 0;
    while let Some(rel) = raw[offset..].find("```") {
        let start = offset + rel;
        let after = start + 3;
        let Some(line_len) = raw[after..].find('\n') else {
            break;
        };
        let info = raw[after..after + line_len].trim();
        let body_start = after + line_len + 1;
        let Some(body_len) = raw[body_start..].find("```") else {
            break;
        };
        let body = body_start..body_start + body_len;
        let whole = start..body.end + 3;
        if info.eq_ignore_ascii_case(WIRE_FENCE) {
            return Some((body, whole));
        }
        if info.eq_ignore_ascii_case("json") && fallback.is_none() {
            fallback = Some((body, whole.clone()));
        }
        offset = whole.end;
    }
    fallback
}

fn extract_block(raw: &str) -> Option<&str> {
    locate_block(raw).map(|(body, _)| &raw[body])
}

/// The free text of a response with the structured block cut out.
pub fn prose(raw: &str) -> String {
    match locate_block(raw) {
        Some((_, whole)) => format!("{}\n{}", &raw[..whole.start], &raw[whole.end..]),
        None => raw.to_string(),
    }
}

#[derive(Serialize)]
struct WireCandidate<'a> {
    rank: u32,
    label: &'a str,
    codes: &'a [String],
    confidence: f64,
    rationale: &'a str,
}

/// Renders candidates as a fenced block that [`parse_response`] accepts.
pub fn render_wire(candidates: &[DiagnosisCandidate]) -> String {
    let wire: Vec<WireCandidate<'_>> = candidates
        .iter()
        .map(|c| WireCandidate {
            rank: c.rank,
            label: &c.label,
            codes: &c.icd10_codes,
            confidence: c.confidence,
            rationale: &c.rationale,
        })
        .collect();
    format!(
        "```{WIRE_FENCE}\n{}\n```\n",
        serde_json::to_string_pretty(&wire).expect("candidates serialize")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn icd10_examples() {
        for ok in ["E74.04", "T56.0X1A", "M04.1", "E85.0", "G31.83", "G20", "F15.959"] {
            assert!(validate_icd10(ok), "{ok}");
        }
        for bad in ["m04.1", "ZZZZ", "E8", "E85.", "E85.12345", "E85-0", "85.0", "E85.0x", ""] {
            assert!(!validate_icd10(bad), "{bad}");
        }
    }

    #[test]
    fn parses_percent_confidence() {
        let raw = "Considering the fever pattern.\n```diagnoses\n[{\"label\": \"FMF\", \"codes\": [\"M04.1\"], \"confidence\": 75, \"rationale\": \"recurrent serositis\"}]\n```\n";
        let r = parse_response(raw, "m1", "c1");
        assert_eq!(r.status, ResponseStatus::Ok);
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.candidates[0].confidence, 0.75);
        assert_eq!(r.candidates[0].rank, 1);
        assert_eq!(r.raw_text, raw);
    }

    #[test]
    fn percent_string_and_fraction() {
        let raw = "```json\n[{\"label\": \"A\", \"confidence\": \"78%\"}, {\"label\": \"B\", \"confidence\": 0.2}]\n```";
        let r = parse_response(raw, "m", "c");
        assert!(r.is_ok(), "{:?}", r.diagnostics);
        assert_eq!(r.candidates[0].confidence, 0.78);
        assert_eq!(r.candidates[1].confidence, 0.2);
        assert_eq!(r.candidates[1].rank, 2);
    }

    #[test]
    fn empty_is_malformed() {
        let r = parse_response("", "m", "c");
        assert_eq!(r.status, ResponseStatus::MalformedOutput);
        assert!(r.candidates.is_empty());
    }

    #[test]
    fn bad_code_is_malformed_with_diagnostic() {
        let raw = "```diagnoses\n[{\"label\": \"X\", \"codes\": [\"ZZZZ\"], \"confidence\": 0.5}]\n```";
        let r = parse_response(raw, "m", "c");
        assert_eq!(r.status, ResponseStatus::MalformedOutput);
        assert_eq!(r.raw_text, raw);
        assert!(r.diagnostics.iter().any(|d| d.contains("ZZZZ") && d.contains("ICD-10")));
    }

    #[test]
    fn rank_gaps_rejected() {
        let raw = "```diagnoses\n[{\"label\": \"A\", \"confidence\": 0.5, \"rank\": 1}, {\"label\": \"B\", \"confidence\": 0.4, \"rank\": 3}]\n```";
        assert_eq!(parse_response(raw, "m", "c").status, ResponseStatus::MalformedOutput);
    }

    #[test]
    fn explicit_ranks_sorted() {
        let raw = "```diagnoses\n[{\"label\": \"B\", \"confidence\": 0.4, \"rank\": 2}, {\"label\": \"A\", \"confidence\": 0.5, \"rank\": 1}]\n```";
        let r = parse_response(raw, "m", "c");
        assert_eq!(r.candidates[0].label, "A");
        assert_eq!(r.candidates[1].label, "B");
    }

    #[test]
    fn prose_excludes_block() {
        let raw = "Before possibly.\n```diagnoses\n[{\"label\": \"A\", \"confidence\": 0.5}]\n```\nAfter text.";
        let p = prose(raw);
        assert!(p.contains("Before possibly.") && p.contains("After text."));
        assert!(!p.contains("label"));
        assert_eq!(prose("no block"), "no block");
    }

    #[test]
    fn out_of_range_confidence() {
        let raw = "```diagnoses\n[{\"label\": \"A\", \"confidence\": 140}]\n```";
        assert_eq!(parse_response(raw, "m", "c").status, ResponseStatus::MalformedOutput);
    }

    #[test]
    fn case_validation() {
        let mut c = ClinicalCase::new("c-1", "t", "");
        assert!(c.validate().is_err());
        c.narrative = "chest pain".into();
        c.demographics.age = Some(131);
        assert!(c.validate().is_err());
        c.demographics.age = Some(45);
        c.validate().unwrap();
        assert_eq!(ClinicalCase::from_document(&c.to_document()).unwrap(), c);
    }

    #[test]
    fn bundle_add_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = CaseBundle::new(dir.path());
        let c = ClinicalCase::new("b", "B", "text");
        bundle.add(&c).unwrap();
        bundle.add(&ClinicalCase::new("a", "A", "text")).unwrap();
        assert!(matches!(bundle.add(&c), Err(CaseError::DuplicateId(_))));
        let ids: Vec<_> = bundle.load().unwrap().into_iter().map(|c| c.case_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    fn candidate_strategy() -> impl Strategy<Value = DiagnosisCandidate> {
        (
            "[A-Za-z][A-Za-z ']{0,20}",
            proptest::collection::vec("[A-Z][0-9]{2}(\\.[0-9A-Z]{1,4})?", 0..3),
            0.0f64..=1.0,
            "[a-z ,.]{0,30}",
        )
            .prop_map(|(label, codes, confidence, rationale)| DiagnosisCandidate {
                label: label.trim().to_string() + "x",
                icd10_codes: codes,
                confidence,
                rank: 0,
                rationale,
            })
    }

    proptest! {
        #[test]
        fn ok_responses_round_trip(mut cands in proptest::collection::vec(candidate_strategy(), 1..8)) {
            for (i, c) in cands.iter_mut().enumerate() {
                c.rank = i as u32 + 1;
            }
            let text = render_wire(&cands);
            let first = parse_response(&text, "m", "c");
            prop_assert_eq!(first.status, ResponseStatus::Ok);
            prop_assert_eq!(&first.candidates, &cands);
            let again = parse_response(&render_wire(&first.candidates), "m", "c");
            prop_assert_eq!(again, first);
        }

        #[test]
        fn confidence_normalization_idempotent(x in 0.0f64..=100.0) {
            let once = normalize_confidence(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&once));
            prop_assert_eq!(normalize_confidence(once), Some(once));
        }

        #[test]
        fn parse_is_total(s in ".{0,200}") {
            let r = parse_response(&s, "m", "c");
            prop_assert_eq!(r.raw_text, s);
            prop_assert_eq!(r.status == ResponseStatus::Ok, !r.candidates.is_empty());
        }
    }
}
