//! Counterfactual sex/gender bias auditing for ordinal triage decisions.
//!
//! The pipeline filters records, builds sex-flipped counterfactual pairs,
//! scores both presentations with a pluggable predictor, and reports paired
//! bias metrics with bootstrap intervals and per-label odds ratios.

pub mod audit;
pub mod bootstrap;
pub mod counterfactual;
pub mod error;
pub mod ingest;
pub mod io;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod par;
pub mod predictions;
pub mod predictor;
pub mod profile;
pub mod report;
pub mod service;
pub mod stratified;
pub mod synth;

pub use error::{AuditError, Result};
