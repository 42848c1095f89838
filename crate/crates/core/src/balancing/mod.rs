//! Balance problems from panels, weights, ridge augmentation and diagnostics.

mod augment;
mod diagnostics;
mod tolerance;

pub use augment::{ridge_augment, AugmentationSpec, AugmentationStep, Augmented, Lambda};
pub use diagnostics::{balance_table, state_weight_summary, BalanceDiagnostics, BalanceRow, StateWeight};
pub use tolerance::{Tier, ToleranceSpec};

use nalgebra::DMatrix;

use crate::calibration::CalibratedCovariates;
use crate::error::{Error, Result};
use crate::panel::RegionPanel;
use crate::qp::{solve_balance_qp, BalanceProblem, BlockCorrelationMatrix, SolveStatus, WeightSolution};

/// Which treated covariates to balance.
#[derive(Debug, Clone, Copy)]
pub enum CovariateSource<'a> {
    /// The observed (noisy) treated rows.
    Raw,
    Calibrated(&'a CalibratedCovariates),
}

/// Treated covariate matrix for a source.
pub fn treated_matrix(panel: &RegionPanel, source: CovariateSource) -> Result<DMatrix<f64>> {
    match source {
        CovariateSource::Raw => Ok(panel.treated_covariates()),
        CovariateSource::Calibrated(c) => {
            let expected = (panel.treated_indices().len(), panel.covariate_names().len());
            if c.x_hat.shape() != expected {
                return Err(Error::Schema(format!(
                    "calibrated covariates have shape {:?}, panel treated block is {:?}",
                    c.x_hat.shape(),
                    expected
                )));
            }
            Ok(c.x_hat.clone())
        }
    }
}

/// `Z` = treated rows, `v` = control means, `Omega` from treated state labels.
pub fn assemble_problem(
    panel: &RegionPanel,
    source: CovariateSource,
    tolerances: &ToleranceSpec,
    rho: f64,
) -> Result<BalanceProblem> {
    panel.require_groups(1, 1)?;
    let delta = tolerances.resolve(panel.covariate_names())?;
    assemble_problem_with(panel, source, delta, panel.control_mean(), rho)
}

/// As [`assemble_problem`] with explicit tolerances and target; the panel
/// needs no control regions.
pub fn assemble_problem_with(
    panel: &RegionPanel,
    source: CovariateSource,
    delta: Vec<f64>,
    target: Vec<f64>,
    rho: f64,
) -> Result<BalanceProblem> {
    panel.require_groups(1, 0)?;
    let z = treated_matrix(panel, source)?;
    let omega = BlockCorrelationMatrix::new(&panel.treated_state_labels(), rho)?;
    BalanceProblem::new(z, target, delta, omega)
}

/// Solve and log the outcome.
pub fn solve_weights(problem: &BalanceProblem) -> WeightSolution {
    let solution = solve_balance_qp(problem);
    match solution.status {
        SolveStatus::Converged => log::debug!(
            "weights converged: {} iterations, {} polish passes, {} nonzero",
            solution.iterations,
            solution.polish_passes,
            solution.active_set.len()
        ),
        SolveStatus::Relaxed => log::warn!("weights returned without full convergence"),
        SolveStatus::Infeasible => log::warn!(
            "balance constraints infeasible, max violation {:e}",
            solution.max_violation.unwrap_or(f64::NAN)
        ),
    }
    solution
}
