//! Deterministic simulator for personalized federated learning with
//! differentially private updates, Rényi accounting, a simulated hash-chained
//! ledger and a content-addressed update store.

pub mod cas;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod ledger;
pub mod model;
pub mod personalization;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
