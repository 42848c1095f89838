use serde::{Deserialize, Serialize};

use super::pipeline::{fit_weights, EstimatorConfig};
use crate::calibration::NoiseCovarianceSet;
use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// One leave-one-state-out fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeFold {
    pub state: String,
    /// Weighted treated outcome without `state`.
    pub estimate: f64,
    pub relaxation_rounds: usize,
    /// Whether the covariate calibration was re-estimated for this fold.
    pub recalibrated: bool,
    /// Balance target used by the fold.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeTrace {
    pub folds: Vec<JackknifeFold>,
    /// Mean of the fold estimates.
    pub mean: f64,
}

impl JackknifeTrace {
    pub fn estimates(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.estimate).collect()
    }

    pub fn variance(&self) -> f64 {
        jackknife_from_estimates(&self.estimates())
    }
}

/// `((m - 1) / m) sum (S_s - S_mean)^2`.
pub fn jackknife_from_estimates(estimates: &[f64]) -> f64 {
    let m = estimates.len() as f64;
    if estimates.len() < 2 {
        return 0.0;
    }
    let mean = estimates.iter().sum::<f64>() / m;
    (m - 1.0) / m * estimates.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
}

/// Leave-one-treated-state-out variance of the weighted treated outcome. Each
/// fold recalibrates and reweights with the target fixed at the full control
/// mean; infeasible folds are relaxed per the configured schedule.
pub fn jackknife_variance(
    panel: &RegionPanel,
    noise: Option<&NoiseCovarianceSet>,
    config: &EstimatorConfig,
) -> Result<(f64, JackknifeTrace)> {
    jackknife_variance_at(panel, noise, config, &panel.control_mean())
}

/// As [`jackknife_variance`] with an explicit balance target.
pub fn jackknife_variance_at(
    panel: &RegionPanel,
    noise: Option<&NoiseCovarianceSet>,
    config: &EstimatorConfig,
    target: &[f64],
) -> Result<(f64, JackknifeTrace)> {
    let states = panel.treated_states();
    if states.len() < 2 {
        return Err(Error::Domain(format!(
            "jackknife needs at least 2 treated states, found {}",
            states.len()
        )));
    }
    let mut folds = Vec::with_capacity(states.len());
    for state in &states {
        let fold_panel = panel.without_state(state)?;
        let run = fit_weights(&fold_panel, noise, config, target, true).map_err(|e| match e {
            Error::Infeasible { .. } => Error::FoldFailure {
                state: state.clone(),
                rounds: config.relaxation.max_rounds,
            },
            other => other,
        })?;
        if run.relaxation_rounds > 0 {
            log::info!("fold without {state}: {} relaxation rounds", run.relaxation_rounds);
        }
        let y = fold_panel.outcome();
        let estimate = run
            .weights()
            .iter()
            .zip(fold_panel.treated_indices())
            .map(|(g, i)| g * y[i])
            .sum();
        folds.push(JackknifeFold {
            state: state.clone(),
            estimate,
            relaxation_rounds: run.relaxation_rounds,
            recalibrated: run.calibrated.is_some(),
            target: run.problem.target().to_vec(),
        });
    }
    let mean = folds.iter().map(|f| f.estimate).sum::<f64>() / folds.len() as f64;
    let trace = JackknifeTrace { folds, mean };
    Ok((trace.variance(), trace))
}
