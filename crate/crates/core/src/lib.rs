//! Hierarchical stable balancing weights for region-level data with noisy
//! covariates and within-state correlated outcomes.

pub mod balancing;
pub mod calibration;
pub mod error;
pub mod inference;
pub mod io;
mod linalg;
pub mod panel;
pub mod qp;
pub mod simulation;

pub use error::{Error, Result};
pub use panel::RegionPanel;
