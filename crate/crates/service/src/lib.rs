//! Delivery layer: file-backed run store, batch metrics, the `/v1` HTTP API
//! and the `plurality` command line.

pub mod api;
pub mod app;
pub mod cli;
pub mod metrics;
pub mod store;
