//! Command-line pipeline and HTTP service for the NPI cost model.

pub mod commands;
pub mod server;
