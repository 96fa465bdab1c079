//! Orchestration of the two-party system: column split, arrival timeline,
//! run configuration, the pipeline itself and result tables.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod split;
pub mod timeline;

pub use config::{ClassWeighting, DatasetPreset, PipelineConfig};
pub use pipeline::{
    run_baseline, run_dvfl, run_dynamic, run_static, RunOutcome, Scenario, StaticOutcome, Strategy, StrategyRecord,
};
pub use report::ResultRow;
pub use split::{vertical_split, VerticalSplit};
pub use timeline::{build_timeline, Arrival, StreamMode, Timeline};
