//! Batch evaluation harness measuring how conversational models adhere to
//! sociocultural norms. The pipeline expands each norm into a prompt matrix,
//! collects model responses, has a judge model surface relevant norms per
//! interactional context, detects violations against the surfaced set, and
//! aggregates violation rates into reports.

pub mod backends;
pub mod error;
pub mod ingest;
pub mod judge;
pub mod promptgen;
pub mod report;
pub mod runner;
pub mod store;
pub mod taxonomy;
pub mod util;

pub use error::Error;
