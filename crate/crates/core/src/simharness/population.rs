//! Expands a population spec (cohorts of identical archetypes) into
//! registry descriptors and simulation profiles.
//!
//! Each model's priors are the catalog prevalences raised to the archetype's
//! `prevalence_exponent` (negative values favour rare diseases), scaled by
//! the archetype, then jittered by a factor `exp(jitter * (2u - 1))` drawn from
//! the model's own stream. Model ids are `<prefix>-NN`, numbered from 01
//! within each cohort.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Deserialize;

use super::{stream, DiseaseCatalog, FaultRates, SimError, SimModelProfile, Verbosity};
use crate::registry::{BiasAnnotation, BiasCategory, CostTier, ModelDescriptor, Region, SizeClass};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ArchetypeSpec {
    pub name: String,
    pub hallucination_rate: f64,
    pub top_k: usize,
    pub case_focus: f64,
    pub cutoff: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "one")]
    pub prevalence_exponent: f64,
    pub latency_ms: u64,
    pub verbosity: Verbosity,
    /// Multipliers on catalog prevalence; unlisted keys keep 1.0.
    #[serde(default)]
    pub prior_scale: BTreeMap<String, f64>,
    /// Keys this archetype never proposes.
    #[serde(default)]
    pub exclude: BTreeSet<String>,
    #[serde(default)]
    pub regional_boost: BTreeMap<String, f64>,
    #[serde(default)]
    pub temporal_boost: BTreeMap<String, f64>,
    #[serde(default)]
    pub faults: FaultRates,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CohortSpec {
    pub prefix: String,
    pub region: Region,
    pub cost_tier: CostTier,
    pub count: usize,
    pub archetype: String,
    #[serde(default = "unknown_size")]
    pub size_class: SizeClass,
    #[serde(default)]
    pub bias: Vec<BiasCategory>,
    #[serde(default)]
    pub release_date: Option<chrono::NaiveDate>,
}

fn one() -> f64 {
    1.0
}

fn unknown_size() -> SizeClass {
    SizeClass::Unknown
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PopulationSpec {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<ArchetypeSpec>,
    #[serde(rename = "cohort")]
    pub cohorts: Vec<CohortSpec>,
}

impl PopulationSpec {
    pub fn from_document(text: &str) -> Result<Self, SimError> {
        let spec: PopulationSpec = toml::from_str(text).map_err(|e| SimError::SpecInvalid(e.to_string()))?;
        if spec.schema_version != 1 {
            return Err(SimError::SpecInvalid(format!(
                "unsupported schema_version {}",
                spec.schema_version
            )));
        }
        Ok(spec)
    }

    pub fn model_count(&self) -> usize {
        self.cohorts.iter().map(|c| c.count).sum()
    }
}

/// Deterministic expansion of `spec`; every profile is validated.
pub fn build_population(
    spec: &PopulationSpec,
    catalog: &DiseaseCatalog,
) -> Result<Vec<(ModelDescriptor, SimModelProfile)>, SimError> {
    if spec.model_count() == 0 {
        return Err(SimError::SpecInvalid("population has no models".into()));
    }
    let archetypes: BTreeMap<&str, &ArchetypeSpec> =
        spec.archetypes.iter().map(|a| (a.name.as_str(), a)).collect();
    if archetypes.len() != spec.archetypes.len() {
        return Err(SimError::SpecInvalid("archetype names must be unique".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.model_count());
    for cohort in &spec.cohorts {
        let arch = archetypes.get(cohort.archetype.as_str()).ok_or_else(|| {
            SimError::SpecInvalid(format!("cohort `{}` names unknown archetype `{}`", cohort.prefix, cohort.archetype))
        })?;
        if !arch.prevalence_exponent.is_finite() {
            return Err(SimError::SpecInvalid(format!("archetype `{}`: prevalence_exponent must be finite", arch.name)));
        }
        if !(arch.jitter.is_finite() && arch.jitter >= 0.0) {
            return Err(SimError::SpecInvalid(format!("archetype `{}`: jitter must be non-negative", arch.name)));
        }
        for key in arch.prior_scale.keys().chain(&arch.exclude) {
            if !catalog.contains(key) {
                return Err(SimError::SpecInvalid(format!("archetype `{}`: unknown key `{key}`", arch.name)));
            }
        }
        for n in 1..=cohort.count {
            let model_id = format!("{}-{n:02}", cohort.prefix);
            if !seen.insert(model_id.clone()) {
                return Err(SimError::SpecInvalid(format!("model id `{model_id}` generated twice")));
            }
            let seed_offset = out.len() as u64;
            let mut rng = stream(spec.seed, seed_offset, &model_id, "population");
            let mut priors = BTreeMap::new();
            for entry in catalog.iter() {
                let jitter = (arch.jitter * (2.0 * rng.random::<f64>() - 1.0)).exp();
                if arch.exclude.contains(&entry.key) {
                    continue;
                }
                let scale = arch.prior_scale.get(&entry.key).copied().unwrap_or(1.0);
                priors.insert(
                    entry.key.clone(),
                    entry.prevalence.powf(arch.prevalence_exponent) * scale * jitter,
                );
            }
            let profile = SimModelProfile {
                model_id: model_id.clone(),
                origin_region: cohort.region,
                disease_priors: priors,
                regional_boost: arch.regional_boost.clone(),
                temporal_boost: arch.temporal_boost.clone(),
                hallucination_rate: arch.hallucination_rate,
                verbosity: arch.verbosity,
                top_k: arch.top_k,
                case_focus: arch.case_focus,
                cutoff: arch.cutoff,
                latency_ms: arch.latency_ms,
                faults: arch.faults,
                seed_offset,
            };
            profile.validate(catalog)?;
            let mut descriptor = ModelDescriptor::new(&model_id, cohort.region, cohort.cost_tier);
            descriptor.display_name = format!("Simulated {} #{n}", cohort.prefix);
            descriptor.endpoint_ref = format!("sim:{model_id}");
            descriptor.size_class = cohort.size_class;
            descriptor.release_date = cohort.release_date;
            descriptor.intended_scope = format!("simulated {} archetype", arch.name);
            descriptor.bias_annotations = cohort
                .bias
                .iter()
                .map(|category| BiasAnnotation {
                    category: *category,
                    note: format!("inherited from the `{}` archetype", arch.name),
                    evidence_ref: None,
                })
                .collect();
            out.push((descriptor, profile));
        }
    }
    Ok(out)
}
