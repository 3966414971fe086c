//! Catalog of ensemble members with provenance and bias metadata.
//!
//! Every model that can be queried is described by a [`ModelDescriptor`]:
//! where it comes from, when it was released, what it costs, and which
//! documented bias categories apply to it. Descriptors are persisted as one
//! TOML document per model so that the catalog stays human-diffable.
//!
//! Readers work against immutable [`RegistrySnapshot`]s; registrations and
//! edits go through a single writer that swaps in a new snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Current version of the on-disk descriptor document.
pub const DESCRIPTOR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model id already registered: {0}")]
    DuplicateId(String),
    #[error("invalid descriptor field `{field}`: {reason}")]
    InvalidDescriptor { field: String, reason: String },
    #[error("unknown model id: {0}")]
    UnknownModel(String),
    #[error("empty input")]
    EmptyInput,
    #[error("registry io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RegistryError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        RegistryError::InvalidDescriptor {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Geographic origin bucket of a model developer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(alias = "USA")]
    US,
    #[serde(alias = "EU")]
    Europe,
    #[serde(alias = "CN")]
    China,
    Other,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::US, Region::Europe, Region::China, Region::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::US => "US",
            Region::Europe => "Europe",
            Region::China => "China",
            Region::Other => "Other",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "us" | "usa" => Ok(Region::US),
            "europe" | "eu" => Ok(Region::Europe),
            "china" | "cn" => Ok(Region::China),
            "other" => Ok(Region::Other),
            _ => Err(RegistryError::invalid(
                "origin_region",
                format!("`{s}` is not one of US, Europe, China, Other"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CostTier {
    Free,
    Paid,
}

impl fmt::Display for CostTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostTier::Free => "Free",
            CostTier::Paid => "Paid",
        })
    }
}

impl FromStr for CostTier {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "free" => Ok(CostTier::Free),
            "paid" => Ok(CostTier::Paid),
            _ => Err(RegistryError::invalid(
                "cost_tier",
                format!("`{s}` is not one of Free, Paid"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
    Unknown,
}

/// The nine documented bias categories. The set is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BiasCategory {
    Historical,
    Representation,
    Measurement,
    Aggregation,
    Learning,
    Evaluation,
    Deployment,
    HumanFactors,
    Feedback,
}

impl BiasCategory {
    pub const ALL: [BiasCategory; 9] = [
        BiasCategory::Historical,
        BiasCategory::Representation,
        BiasCategory::Measurement,
        BiasCategory::Aggregation,
        BiasCategory::Learning,
        BiasCategory::Evaluation,
        BiasCategory::Deployment,
        BiasCategory::HumanFactors,
        BiasCategory::Feedback,
    ];
}

impl FromStr for BiasCategory {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BiasCategory::ALL
            .into_iter()
            .find(|c| format!("{c:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                RegistryError::invalid(
                    "bias_annotations.category",
                    format!("`{s}` is not a known bias category"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BiasAnnotation {
    pub category: BiasCategory,
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_ref: Option<String>,
}

/// Provenance and bias profile of one ensemble member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub display_name: String,
    pub endpoint_ref: String,
    pub origin_region: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_date: Option<NaiveDate>,
    pub cost_tier: CostTier,
    pub size_class: SizeClass,
    #[serde(default)]
    pub intended_scope: String,
    #[serde(default)]
    pub bias_annotations: BTreeSet<BiasAnnotation>,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl ModelDescriptor {
    /// Minimal descriptor, mostly useful in tests and fixtures.
    pub fn new(model_id: impl Into<String>, origin_region: Region, cost_tier: CostTier) -> Self {
        let model_id = model_id.into();
        ModelDescriptor {
            display_name: model_id.clone(),
            endpoint_ref: model_id.clone(),
            model_id,
            origin_region,
            release_date: None,
            cost_tier,
            size_class: SizeClass::Unknown,
            intended_scope: String::new(),
            bias_annotations: BTreeSet::new(),
            enabled: true,
        }
    }

    /// Checks every invariant against the given run clock date.
    pub fn validate(&self, today: NaiveDate) -> Result<(), RegistryError> {
        if self.model_id.is_empty() {
            return Err(RegistryError::invalid("model_id", "must not be empty"));
        }
        if !self
            .model_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
        {
            return Err(RegistryError::invalid(
                "model_id",
                "only ASCII letters, digits and `-_.:` are allowed",
            ));
        }
        if self.display_name.trim().is_empty() {
            return Err(RegistryError::invalid("display_name", "must not be empty"));
        }
        if self.endpoint_ref.trim().is_empty() {
            return Err(RegistryError::invalid("endpoint_ref", "must not be empty"));
        }
        if let Some(date) = self.release_date {
            if date > today {
                return Err(RegistryError::invalid(
                    "release_date",
                    format!("{date} is after the run clock ({today})"),
                ));
            }
        }
        Ok(())
    }

    /// Parses a descriptor document and validates its schema version.
    pub fn from_document(text: &str) -> Result<Self, RegistryError> {
        let doc: DescriptorDocument = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("document")
                .to_string();
            RegistryError::InvalidDescriptor {
                field,
                reason: e.message().to_string(),
            }
        })?;
        if doc.schema_version != DESCRIPTOR_SCHEMA_VERSION {
            return Err(RegistryError::invalid(
                "schema_version",
                format!(
                    "unsupported version {} (expected {DESCRIPTOR_SCHEMA_VERSION})",
                    doc.schema_version
                ),
            ));
        }
        Ok(doc.model)
    }

    pub fn to_document(&self) -> String {
        let doc = DescriptorDocument {
            schema_version: DESCRIPTOR_SCHEMA_VERSION,
            model: self.clone(),
        };
        toml::to_string(&doc).expect("descriptor serializes to toml")
    }
}

#[derive(Serialize, Deserialize)]
struct DescriptorDocument {
    schema_version: u32,
    #[serde(flatten)]
    model: ModelDescriptor,
}

/// Predicate set for [`Registry::select_models`]. Unset fields do not filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<BTreeSet<Region>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_tiers: Option<BTreeSet<CostTier>>,
    /// Defaults to `true` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled_only: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_release_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<BTreeSet<String>>,
}

impl ModelFilter {
    pub fn matches(&self, d: &ModelDescriptor) -> bool {
        if self.enabled_only.unwrap_or(true) && !d.enabled {
            return false;
        }
        if let Some(regions) = &self.regions {
            if !regions.contains(&d.origin_region) {
                return false;
            }
        }
        if let Some(tiers) = &self.cost_tiers {
            if !tiers.contains(&d.cost_tier) {
                return false;
            }
        }
        if let Some(min) = self.min_release_date {
            match d.release_date {
                Some(date) if date >= min => {}
                _ => return false,
            }
        }
        if let Some(ids) = &self.ids {
            if !ids.contains(&d.model_id) {
                return false;
            }
        }
        true
    }

    pub fn regions(regions: impl IntoIterator<Item = Region>) -> Self {
        ModelFilter {
            regions: Some(regions.into_iter().collect()),
            ..Default::default()
        }
    }

    pub fn ids<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Self {
        ModelFilter {
            ids: Some(ids.into_iter().map(Into::into).collect()),
            ..Default::default()
        }
    }
}

/// Immutable view of the registry, ordered by model id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    models: BTreeMap<String, ModelDescriptor>,
}

impl RegistrySnapshot {
    pub fn from_models(models: impl IntoIterator<Item = ModelDescriptor>) -> Self {
        RegistrySnapshot {
            models: models
                .into_iter()
                .map(|m| (m.model_id.clone(), m))
                .collect(),
        }
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelDescriptor> {
        self.models.get(model_id)
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.models.contains_key(model_id)
    }

    pub fn region_of(&self, model_id: &str) -> Option<Region> {
        self.get(model_id).map(|d| d.origin_region)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelDescriptor> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn select(&self, filter: &ModelFilter) -> Vec<ModelDescriptor> {
        self.models
            .values()
            .filter(|d| filter.matches(d))
            .cloned()
            .collect()
    }

    /// Restricts the snapshot to the given ids; unknown ids are skipped.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> RegistrySnapshot {
        RegistrySnapshot::from_models(ids.into_iter().filter_map(|id| self.get(id).cloned()))
    }

    /// Content address of the snapshot (`sha256:<hex>` over its JSON form).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.models).expect("snapshot serializes");
        format!("sha256:{}", hex::encode(Sha256::digest(&bytes)))
    }
}

/// Shared model catalog. Reads take an `Arc` snapshot; writes are serialized.
#[derive(Debug, Default)]
pub struct Registry {
    current: RwLock<Arc<RegistrySnapshot>>,
    writer: Mutex<()>,
    dir: Option<PathBuf>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry::default()
    }

    /// Loads every `*.toml` descriptor in `dir`; later registrations are written there.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| RegistryError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|source| RegistryError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        entries.sort();
        let mut models = BTreeMap::new();
        for path in entries {
            let text = fs::read_to_string(&path).map_err(|source| RegistryError::Io {
                path: path.clone(),
                source,
            })?;
            let desc = ModelDescriptor::from_document(&text)?;
            if models.contains_key(&desc.model_id) {
                return Err(RegistryError::DuplicateId(desc.model_id));
            }
            models.insert(desc.model_id.clone(), desc);
        }
        Ok(Registry {
            current: RwLock::new(Arc::new(RegistrySnapshot { models })),
            writer: Mutex::new(()),
            dir: Some(dir),
        })
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.current.read().expect("registry lock").clone()
    }

    pub fn register_model(&self, descriptor: ModelDescriptor) -> Result<String, RegistryError> {
        self.register_model_at(descriptor, Utc::now().date_naive())
    }

    /// Registers against an explicit run clock date.
    pub fn register_model_at(
        &self,
        descriptor: ModelDescriptor,
        today: NaiveDate,
    ) -> Result<String, RegistryError> {
        descriptor.validate(today)?;
        let _guard = self.writer.lock().expect("registry writer");
        let current = self.snapshot();
        if current.contains(&descriptor.model_id) {
            return Err(RegistryError::DuplicateId(descriptor.model_id));
        }
        self.persist(&descriptor, true)?;
        let id = descriptor.model_id.clone();
        let mut next = (*current).clone();
        next.models.insert(id.clone(), descriptor);
        *self.current.write().expect("registry lock") = Arc::new(next);
        Ok(id)
    }

    /// Enables or disables a model. Earlier run snapshots are unaffected.
    pub fn set_enabled(&self, model_id: &str, enabled: bool) -> Result<(), RegistryError> {
        let _guard = self.writer.lock().expect("registry writer");
        let current = self.snapshot();
        let mut desc = current
            .get(model_id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownModel(model_id.to_string()))?;
        desc.enabled = enabled;
        self.persist(&desc, false)?;
        let mut next = (*current).clone();
        next.models.insert(model_id.to_string(), desc);
        *self.current.write().expect("registry lock") = Arc::new(next);
        Ok(())
    }

    pub fn select_models(&self, filter: &ModelFilter) -> Vec<ModelDescriptor> {
        self.snapshot().select(filter)
    }

    fn persist(&self, desc: &ModelDescriptor, create_new: bool) -> Result<(), RegistryError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.toml", desc.model_id));
        let io = |source| RegistryError::Io {
            path: path.clone(),
            source,
        };
        if create_new {
            use std::io::Write;
            let mut file = fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(io)?;
            file.write_all(desc.to_document().as_bytes()).map_err(io)?;
        } else {
            fs::write(&path, desc.to_document()).map_err(io)?;
        }
        Ok(())
    }
}

/// Fraction of models per origin region. Regions with no models are omitted.
pub fn region_distribution(
    models: &[ModelDescriptor],
) -> Result<BTreeMap<Region, f64>, RegistryError> {
    if models.is_empty() {
        return Err(RegistryError::EmptyInput);
    }
    let mut counts: BTreeMap<Region, usize> = BTreeMap::new();
    for m in models {
        *counts.entry(m.origin_region).or_default() += 1;
    }
    let total = models.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(r, c)| (r, c as f64 / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn today() -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, 9, 1).unwrap()
    }

    fn fleet(us: usize, eu: usize, cn: usize, other: usize) -> Vec<ModelDescriptor> {
        let mut out = Vec::new();
        for (region, n, tag) in [
            (Region::US, us, "us"),
            (Region::Europe, eu, "eu"),
            (Region::China, cn, "cn"),
            (Region::Other, other, "ot"),
        ] {
            for i in 0..n {
                out.push(ModelDescriptor::new(
                    format!("m-{tag}-{i:02}"),
                    region,
                    CostTier::Free,
                ));
            }
        }
        out
    }

    #[test]
    fn register_round_trip() {
        let reg = Registry::in_memory();
        let id = reg
            .register_model_at(
                ModelDescriptor::new("m-eu-01", Region::Europe, CostTier::Free),
                today(),
            )
            .unwrap();
        assert_eq!(id, "m-eu-01");
        assert_eq!(
            reg.snapshot().get("m-eu-01").unwrap().origin_region,
            Region::Europe
        );
    }

    #[test]
    fn duplicate_id_rejected() {
        let reg = Registry::in_memory();
        let d = ModelDescriptor::new("m-eu-01", Region::Europe, CostTier::Free);
        reg.register_model_at(d.clone(), today()).unwrap();
        assert!(matches!(
            reg.register_model_at(d, today()),
            Err(RegistryError::DuplicateId(id)) if id == "m-eu-01"
        ));
    }

    #[test]
    fn unknown_bias_category_is_invalid_descriptor() {
        let doc = r#"
schema_version = 1
model_id = "m-x"
display_name = "X"
endpoint_ref = "x/x"
origin_region = "Europe"
cost_tier = "Free"
size_class = "Small"

[[bias_annotations]]
category = "Stylistic"
note = "prose is florid"
"#;
        let err = ModelDescriptor::from_document(doc).unwrap_err();
        assert!(matches!(err, RegistryError::InvalidDescriptor { .. }), "{err}");
        assert!("Stylistic".parse::<BiasCategory>().is_err());
        assert_eq!(
            "humanfactors".parse::<BiasCategory>().unwrap(),
            BiasCategory::HumanFactors
        );
    }

    #[test]
    fn future_release_date_rejected() {
        let mut d = ModelDescriptor::new("m-1", Region::US, CostTier::Paid);
        d.release_date = NaiveDate::from_ymd_opt(2030, 1, 1);
        let err = Registry::in_memory().register_model_at(d, today()).unwrap_err();
        assert!(
            matches!(&err, RegistryError::InvalidDescriptor { field, .. } if field == "release_date")
        );
    }

    #[test]
    fn missing_schema_version_rejected() {
        let d = ModelDescriptor::new("m-1", Region::US, CostTier::Paid);
        let doc = d.to_document().replace("schema_version = 1\n", "");
        assert!(ModelDescriptor::from_document(&doc).is_err());
        assert_eq!(ModelDescriptor::from_document(&d.to_document()).unwrap(), d);
    }

    #[test]
    fn select_by_region_sorted() {
        let reg = Registry::in_memory();
        for d in fleet(2, 3, 0, 0).into_iter().rev() {
            reg.register_model_at(d, today()).unwrap();
        }
        let eu: Vec<_> = reg
            .select_models(&ModelFilter::regions([Region::Europe]))
            .into_iter()
            .map(|d| d.model_id)
            .collect();
        assert_eq!(eu, vec!["m-eu-00", "m-eu-01", "m-eu-02"]);
    }

    #[test]
    fn empty_filter_returns_enabled_only() {
        let reg = Registry::in_memory();
        for d in fleet(2, 1, 0, 0) {
            reg.register_model_at(d, today()).unwrap();
        }
        reg.set_enabled("m-us-01", false).unwrap();
        let all = reg.select_models(&ModelFilter::default());
        assert_eq!(all.len(), 2);
        let with_disabled = reg.select_models(&ModelFilter {
            enabled_only: Some(false),
            ..Default::default()
        });
        assert_eq!(with_disabled.len(), 3);
    }

    #[test]
    fn region_distribution_matches_hand_count() {
        let dist = region_distribution(&fleet(13, 2, 3, 2)).unwrap();
        // hand count over 20 models
        assert_eq!(dist[&Region::US], 13.0 / 20.0);
        assert!((dist[&Region::US] - 0.65).abs() < 1e-12);
        assert!((dist[&Region::Europe] - 0.10).abs() < 1e-12);
        assert!((dist[&Region::China] - 0.15).abs() < 1e-12);
        assert!((dist[&Region::Other] - 0.10).abs() < 1e-12);
        assert!((dist.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn region_distribution_edges() {
        let one = region_distribution(&fleet(0, 0, 1, 0)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[&Region::China], 1.0);
        assert!(matches!(
            region_distribution(&[]),
            Err(RegistryError::EmptyInput)
        ));
    }

    #[test]
    fn persisted_registry_reloads() {
        let dir = tempfile::tempdir().unwrap();
        {
            let reg = Registry::open(dir.path()).unwrap();
            let mut d = ModelDescriptor::new("m-eu-01", Region::Europe, CostTier::Free);
            d.release_date = NaiveDate::from_ymd_opt(2024, 7, 24);
            d.bias_annotations.insert(BiasAnnotation {
                category: BiasCategory::Representation,
                note: "European web corpus".into(),
                evidence_ref: Some("model card".into()),
            });
            reg.register_model_at(d, today()).unwrap();
        }
        let reg = Registry::open(dir.path()).unwrap();
        let snap = reg.snapshot();
        let d = snap.get("m-eu-01").unwrap();
        assert_eq!(d.bias_annotations.len(), 1);
        assert_eq!(d.release_date, NaiveDate::from_ymd_opt(2024, 7, 24));
    }

    #[test]
    fn snapshot_is_unaffected_by_later_edits() {
        let reg = Registry::in_memory();
        reg.register_model_at(ModelDescriptor::new("a", Region::US, CostTier::Free), today())
            .unwrap();
        let before = reg.snapshot();
        reg.set_enabled("a", false).unwrap();
        assert!(before.get("a").unwrap().enabled);
        assert!(!reg.snapshot().get("a").unwrap().enabled);
        assert_ne!(before.digest(), reg.snapshot().digest());
    }
}
