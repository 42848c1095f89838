//! Effect estimates, variances, intervals and placebo checks.

mod cluster;
mod estimate;
mod jackknife;
mod oaxaca;
mod pipeline;
mod placebo;

pub use cluster::control_mean_variance;
pub use estimate::{confidence_interval, point_estimate, t_quantile, EffectEstimate};
pub use jackknife::{jackknife_from_estimates, jackknife_variance, jackknife_variance_at, JackknifeFold, JackknifeTrace};
pub use oaxaca::{oaxaca_blinder_weights, RegressionMode};
pub use pipeline::{fit_weights, relax_tolerances, EstimatorConfig, PipelineRun, RelaxationSchedule};
pub use placebo::{placebo_validation, PlaceboEstimator, PlaceboRow, PlaceboWindow, YEAR_SEPARATOR};

use crate::calibration::NoiseCovarianceSet;
use crate::error::Result;
use crate::panel::RegionPanel;

/// Fitted weights, point estimate, both variance components and a t interval.
#[derive(Debug, Clone)]
pub struct FullEstimate {
    pub run: PipelineRun,
    pub estimate: EffectEstimate,
    pub trace: JackknifeTrace,
}

/// Full-sample fit plus leave-one-state-out and cluster-robust variances.
pub fn estimate_effect(
    panel: &RegionPanel,
    noise: Option<&NoiseCovarianceSet>,
    config: &EstimatorConfig,
) -> Result<FullEstimate> {
    let run = fit_weights(panel, noise, config, &panel.control_mean(), false)?;
    let mut estimate = point_estimate(run.weights(), panel)?;
    let (var_psi1, trace) = jackknife_variance(panel, noise, config)?;
    estimate.var_psi1 = Some(var_psi1);
    estimate.var_psi0 = Some(control_mean_variance(panel)?);
    let estimate = estimate.with_interval(panel.treated_states().len())?;
    Ok(FullEstimate { run, estimate, trace })
}
