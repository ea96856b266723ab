//! HTTP service and command-line surface for the medbrain engine.

pub mod cli;
pub mod config;
pub mod http;
pub mod sessions;
