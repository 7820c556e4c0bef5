//! The iEnvironment platform service: storage, access control, ingestion,
//! working sets, provenance, notifications, compute, the HTTP API and the
//! command-line client.

pub mod api;
pub mod auth;
pub mod catalog;
pub mod cli;
pub mod clock;
pub mod compute;
pub mod config;
pub mod error;
pub mod ingest;
pub mod models;
pub mod notify;
pub mod platform;
pub mod provenance;
mod state;
pub mod wire;
pub mod workingset;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::Config;
pub use error::{Error, ErrorFamily, Result};
pub use platform::Platform;
