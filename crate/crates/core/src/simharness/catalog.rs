//! Disease vocabulary the simulated models draw from.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::SimError;
use crate::casemodel::validate_icd10;
use crate::consensus::{icd10_category, normalize_label};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CatalogEntry {
    pub key: String,
    pub label: String,
    #[serde(default)]
    pub codes: Vec<String>,
    pub prevalence: f64,
    #[serde(default)]
    pub affinity: Option<String>,
    #[serde(default)]
    pub era: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FabricatedEntry {
    label: String,
}

#[derive(Debug, Deserialize)]
struct CatalogDocument {
    schema_version: u32,
    disease: Vec<CatalogEntry>,
    #[serde(default)]
    fabricated: Vec<FabricatedEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseCatalog {
    entries: BTreeMap<String, CatalogEntry>,
    fabricated: Vec<String>,
}

/// Key the consensus stage will derive for an entry with these fields.
fn derived_key(label: &str, codes: &[String]) -> String {
    match codes.first().and_then(|c| icd10_category(c)) {
        Some(cat) => cat.to_lowercase(),
        None => normalize_label(label),
    }
}

impl DiseaseCatalog {
    pub fn from_document(text: &str) -> Result<Self, SimError> {
        let doc: CatalogDocument =
            toml::from_str(text).map_err(|e| SimError::CatalogInvalid(e.to_string()))?;
        if doc.schema_version != 1 {
            return Err(SimError::CatalogInvalid(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let mut entries = BTreeMap::new();
        for e in doc.disease {
            if let Some(bad) = e.codes.iter().find(|c| !validate_icd10(c)) {
                return Err(SimError::CatalogInvalid(format!("`{}`: bad code `{bad}`", e.label)));
            }
            let derived = derived_key(&e.label, &e.codes);
            if derived != e.key {
                return Err(SimError::CatalogInvalid(format!(
                    "`{}` declares key `{}` but canonicalizes to `{derived}`",
                    e.label, e.key
                )));
            }
            if !(e.prevalence.is_finite() && e.prevalence > 0.0) {
                return Err(SimError::CatalogInvalid(format!("`{}`: prevalence must be positive", e.label)));
            }
            let key = e.key.clone();
            if entries.insert(key.clone(), e).is_some() {
                return Err(SimError::CatalogInvalid(format!("duplicate key `{key}`")));
            }
        }
        if entries.is_empty() {
            return Err(SimError::CatalogInvalid("no diseases".into()));
        }
        let fabricated: Vec<String> = doc.fabricated.into_iter().map(|f| f.label).collect();
        for label in &fabricated {
            if entries.contains_key(&normalize_label(label)) {
                return Err(SimError::CatalogInvalid(format!("fabricated `{label}` collides with a real key")));
            }
        }
        Ok(DiseaseCatalog { entries, fabricated })
    }

    pub fn get(&self, key: &str) -> Option<&CatalogEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fabricated(&self) -> &[String] {
        &self.fabricated
    }
}
