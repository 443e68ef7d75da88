//! Declarative end-to-end runs: corpus generation through intervention
//! reports, with staged on-disk caching.

mod config;
mod report;
mod run;
pub mod stages;

pub use config::{
    derive_seed, AnalysisParams, CorpusParams, InterveneParams, ModelParams, PipelineConfig, Precision, Seeds,
};
pub use report::{
    InterventionRow, LeakageRow, LensSummary, Losses, NeuronSummary, Report, SimilaritySummary, SplitSizes,
};
pub use run::{Manifest, Pipeline, RunOutcome, Stage, StageRecord};
