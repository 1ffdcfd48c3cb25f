//! Instruction-data curation: choose a small, complex and diverse instruction subset, then
//! plan padding-efficient training batches for it.

pub mod clustering;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod jsonl;
pub mod packing;
pub mod pipeline;
pub mod scoring;
pub mod selection;

pub use error::{Error, Result};
pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, PipelineError, Stage};
