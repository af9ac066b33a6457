pub mod config;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunOptions, Stage};
