//! Estimation, pricing and optimization of non-pharmaceutical interventions
//! for an epidemic described by a weekly-varying SEIRD model.

pub mod artifacts;
pub mod cost;
pub mod counterfactual;
pub mod epi;
pub mod error;
pub mod icer;
pub mod inference;
pub mod ingest;
pub mod mcmc;
pub mod npi;
pub mod observation;
pub mod optimizer;
pub mod regression;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
