//! Multi-model diagnostic ensemble: model registry, case model, provider
//! fan-out, consensus stratification, bias attribution, report synthesis and
//! a seeded simulated population for offline runs.

pub mod assets;
pub mod biaslens;
pub mod casemodel;
pub mod consensus;
pub mod gateway;
pub mod pipeline;
pub mod registry;
pub mod simharness;
pub mod synthesis;
