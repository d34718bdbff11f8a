//! Experiment pipeline for TAIL-ILC: generate references, label them with
//! the ILC expert, train both students, and evaluate them on a simulated
//! stage. Every stage writes its outputs atomically and records their
//! checksums in a manifest.

pub mod config;
pub mod error;
pub mod manifest;
pub mod models;
pub mod pipeline;
pub mod store;
pub mod verdict;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use manifest::{RunManifest, Stage};
pub use pipeline::{Outcome, Pipeline, Student};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
