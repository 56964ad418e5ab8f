//! File formats, the event-sourced case store, the HTTP referral service
//! and the `mcunet` command line, all built on `mcunet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod pipeline;
pub mod report;
pub mod service;
pub mod store;
pub mod tns;

pub use error::{FailureKind, Result, TriageError};
