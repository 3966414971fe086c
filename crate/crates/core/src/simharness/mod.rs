//! Seeded simulated model population and brute-force reference oracles.
//!
//! Every random draw comes from a ChaCha8 stream whose 32-byte seed is
//! `SHA-256("{seed}|{seed_offset}|{case_id}|{purpose}")`, so a draw depends
//! only on its own (model, case, purpose) coordinates and never on the order
//! in which models are queried.

mod catalog;
pub mod oracle;
mod population;
mod profile;
mod provider;

pub use catalog::{CatalogEntry, DiseaseCatalog};
pub use population::{build_population, ArchetypeSpec, CohortSpec, PopulationSpec};
pub use profile::{FaultKind, FaultRates, MarkerVocabulary, SimModelProfile, SimOutput, Simulator, Verbosity};
pub use provider::SimulatedProvider;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid profile `{model_id}`: {reason}")]
    ProfileInvalid { model_id: String, reason: String },
    #[error("case `{case_id}` has no tag in the prior space of `{model_id}`")]
    CaseNotSupported { model_id: String, case_id: String },
    #[error("invalid population spec: {0}")]
    SpecInvalid(String),
    #[error("invalid disease catalog: {0}")]
    CatalogInvalid(String),
}

/// Stable per-purpose random stream.
pub fn stream(seed: u64, seed_offset: u64, case_id: &str, purpose: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}|{seed_offset}|{case_id}|{purpose}").as_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}
