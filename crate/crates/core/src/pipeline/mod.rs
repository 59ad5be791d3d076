//! Staged pipeline: configuration, on-disk artifacts and the stage commands.

pub mod config;
pub mod stages;
pub mod store;

pub use config::{PipelineConfig, Seeds};
pub use stages::{run_all, CaseSelection, StageOutcome};
pub use store::ArtifactStore;
