//! Monte Carlo study of the weighting estimators under noisy, clustered data.

mod config;
mod draw;
mod study;

pub use config::{theoretical_attenuation_bias, SimConfig, SizeModel};
pub use draw::{
    draw_population, draw_sample_and_observe, stream_rng, InputSet, Population, PopulationState, SimDraw,
};
pub use study::{
    cell_seed, run_cell, run_replicate, run_study, summarize, CellRun, Metrics, MetricsRow, ReplicateOutcome,
    StudyEstimator, StudyGrid,
};
