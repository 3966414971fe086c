//! Bundled data files: synonyms, marker lexicons, disease catalog, default
//! simulated population and the twelve synthetic fixture cases.

use std::sync::Arc;

use crate::biaslens::AnalysisConfig;
use crate::casemodel::ClinicalCase;
use crate::consensus::SynonymTable;
use crate::registry::ModelDescriptor;
use crate::simharness::{
    build_population, DiseaseCatalog, MarkerVocabulary, PopulationSpec, SimModelProfile, SimulatedProvider, Simulator,
};

pub const SYNONYMS: &str = include_str!("../assets/synonyms.txt");
pub const LEXICONS: &str = include_str!("../assets/lexicons.txt");
pub const CATALOG: &str = include_str!("../assets/catalog.toml");
pub const POPULATION: &str = include_str!("../assets/population.toml");

pub const CASES: [(&str, &str); 12] = [
    ("autoimmune-encephalitis", include_str!("../assets/cases/autoimmune-encephalitis.toml")),
    ("behcet", include_str!("../assets/cases/behcet.toml")),
    ("fmf", include_str!("../assets/cases/fmf.toml")),
    ("hemochromatosis", include_str!("../assets/cases/hemochromatosis.toml")),
    ("iga-nephropathy", include_str!("../assets/cases/iga-nephropathy.toml")),
    ("iga-nephropathy-diversity", include_str!("../assets/cases/iga-nephropathy-diversity.toml")),
    ("lewy-body", include_str!("../assets/cases/lewy-body.toml")),
    ("manganese-parkinson", include_str!("../assets/cases/manganese-parkinson.toml")),
    ("mcardle", include_str!("../assets/cases/mcardle.toml")),
    ("meth-psychosis", include_str!("../assets/cases/meth-psychosis.toml")),
    ("porphyria", include_str!("../assets/cases/porphyria.toml")),
    ("wilson", include_str!("../assets/cases/wilson.toml")),
];

/// Terms whose mentions are broken down by model region.
pub const REGIONAL_TERMS: [&str; 1] = ["m04"];
/// Terms tracked across cases for era effects.
pub const WATCHLIST: [&str; 2] = ["b20", "u07"];

pub fn synonyms() -> SynonymTable {
    SYNONYMS.parse().expect("bundled synonyms parse")
}

pub fn analysis_config() -> AnalysisConfig {
    AnalysisConfig::from_assets(
        synonyms(),
        LEXICONS,
        REGIONAL_TERMS.map(String::from).to_vec(),
        WATCHLIST.map(String::from).to_vec(),
    )
    .expect("bundled lexicons parse")
}

pub fn fixture_cases() -> Vec<ClinicalCase> {
    CASES
        .iter()
        .map(|(_, doc)| ClinicalCase::from_document(doc).expect("bundled case parses"))
        .collect()
}

pub fn catalog() -> DiseaseCatalog {
    DiseaseCatalog::from_document(CATALOG).expect("bundled catalog parses")
}

pub fn simulator() -> Arc<Simulator> {
    Arc::new(Simulator::new(catalog(), MarkerVocabulary::from_config(&analysis_config())))
}

pub fn population() -> Vec<(ModelDescriptor, SimModelProfile)> {
    let spec = PopulationSpec::from_document(POPULATION).expect("bundled population parses");
    build_population(&spec, &catalog()).expect("bundled population builds")
}

/// Simulated provider over the default population.
pub fn simulated_provider() -> SimulatedProvider {
    SimulatedProvider::new(simulator(), population().into_iter().map(|(_, p)| p))
}
