//! Orchestration of the full pipeline: configuration, the artifact store,
//! the stages and the evaluation report.

pub mod artifacts;
pub mod config;
pub mod eval;
pub mod stages;

pub use artifacts::{ArtifactRecord, ArtifactStore};
pub use config::PipelineConfig;
pub use eval::{evaluate, EvalReport};
pub use stages::{plan, run_stage, run_through, Stage, StageOutcome};
