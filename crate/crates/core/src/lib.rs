//! Expert-enhanced chest X-ray instruction data: ingestion, prompt
//! enrichment, patient-level splits, scoring, and paired significance tests.

pub mod client;
pub mod config;
pub mod corpus;
pub mod enrich;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod split;
pub mod stats;

pub use error::{Error, ErrorKind, Result};
