use serde::{Deserialize, Serialize};

use crate::balancing::{
    assemble_problem_with, ridge_augment, AugmentationSpec, AugmentationStep, CovariateSource, ToleranceSpec,
};
use crate::calibration::{calibrate, AdjustmentKind, CalibratedCovariates, NoiseCovarianceSet};
use crate::error::{Error, Result};
use crate::panel::RegionPanel;
use crate::qp::{solve_balance_qp_with, BalanceProblem, SolveStatus, SolverSettings, WeightSolution};

/// How tolerances grow when a constraint set is infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSchedule {
    pub factor: f64,
    pub max_rounds: usize,
}

impl Default for RelaxationSchedule {
    fn default() -> Self {
        Self {
            factor: 1.2,
            max_rounds: 25,
        }
    }
}

/// Everything needed to turn a panel into treated weights.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// `None` balances the observed covariates.
    pub adjustment: Option<AdjustmentKind>,
    pub rho: f64,
    pub tolerances: ToleranceSpec,
    pub augmentation: Option<AugmentationSpec>,
    pub relaxation: RelaxationSchedule,
    pub solver: SolverSettings,
}

impl EstimatorConfig {
    pub fn new(tolerances: ToleranceSpec, rho: f64) -> Self {
        Self {
            adjustment: None,
            rho,
            tolerances,
            augmentation: None,
            relaxation: RelaxationSchedule::default(),
            solver: SolverSettings::default(),
        }
    }

    pub fn with_adjustment(mut self, kind: Option<AdjustmentKind>) -> Self {
        self.adjustment = kind;
        self
    }

    pub fn with_augmentation(mut self, spec: Option<AugmentationSpec>) -> Self {
        self.augmentation = spec;
        self
    }

    /// "SBW", "H-SBW", "BC-SBW" or "BC-HSBW".
    pub fn estimator_label(&self) -> &'static str {
        match (self.augmentation.is_some(), self.rho > 0.0) {
            (false, false) => "SBW",
            (false, true) => "H-SBW",
            (true, false) => "BC-SBW",
            (true, true) => "BC-HSBW",
        }
    }

    pub fn adjustment_label(&self) -> &'static str {
        adjustment_label(self.adjustment)
    }
}

pub(crate) fn adjustment_label(kind: Option<AdjustmentKind>) -> &'static str {
    match kind {
        None => "Unadjusted",
        Some(AdjustmentKind::Homogeneous) => "Homogeneous",
        Some(AdjustmentKind::Heterogeneous) => "Heterogeneous",
        Some(AdjustmentKind::Correlated) => "Correlated",
    }
}

/// Output of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub problem: BalanceProblem,
    /// Final weights (augmented when augmentation was requested).
    pub solution: WeightSolution,
    pub calibrated: Option<CalibratedCovariates>,
    pub lambda: Option<f64>,
    pub augmentation_trace: Vec<AugmentationStep>,
    pub relaxation_rounds: usize,
    /// Tolerances actually used.
    pub tolerance: Vec<f64>,
}

impl PipelineRun {
    pub fn weights(&self) -> &[f64] {
        &self.solution.gamma
    }
}

/// Calibrate (if configured), balance toward `target`, and augment (if
/// configured). With `relax`, infeasible tolerances are widened according to
/// the schedule; otherwise infeasibility is an error.
pub fn fit_weights(
    panel: &RegionPanel,
    noise: Option<&NoiseCovarianceSet>,
    config: &EstimatorConfig,
    target: &[f64],
    relax: bool,
) -> Result<PipelineRun> {
    let calibrated = match config.adjustment {
        None => None,
        Some(kind) => {
            let noise = noise.ok_or_else(|| {
                Error::Schema(format!("{} adjustment needs noise covariances", kind.as_str()))
            })?;
            Some(calibrate(panel, noise, kind)?)
        }
    };
    let source = match &calibrated {
        Some(c) => CovariateSource::Calibrated(c),
        None => CovariateSource::Raw,
    };
    let mut delta = config.tolerances.resolve(panel.covariate_names())?;
    let mut problem = assemble_problem_with(panel, source, delta.clone(), target.to_vec(), config.rho)?;
    let mut rounds = 0;
    let mut solution = loop {
        let solution = solve_balance_qp_with(&problem, &config.solver);
        if solution.status != SolveStatus::Infeasible {
            break solution;
        }
        let violation = solution.max_violation.unwrap_or(f64::NAN);
        if !relax || rounds >= config.relaxation.max_rounds {
            return Err(Error::Infeasible { max_violation: violation });
        }
        rounds += 1;
        delta = relax_tolerances(&delta, &solution.imbalance, violation, config.relaxation.factor);
        log::info!("relaxation round {rounds}: tolerances {delta:?}");
        problem = problem.with_tolerance(delta.clone())?;
    };
    if solution.status == SolveStatus::Relaxed {
        log::warn!("balancing weights returned without full convergence");
    }
    let mut lambda = None;
    let mut augmentation_trace = Vec::new();
    if let Some(spec) = &config.augmentation {
        let augmented = ridge_augment(&solution, problem.z(), problem.target(), problem.omega(), spec)?;
        if augmented.negative_weights > 0 {
            log::info!("augmented weights: {} negative", augmented.negative_weights);
        }
        lambda = augmented.lambda;
        augmentation_trace = augmented.trace;
        solution = augmented.solution;
    }
    Ok(PipelineRun {
        problem,
        solution,
        calibrated,
        lambda,
        augmentation_trace,
        relaxation_rounds: rounds,
        tolerance: delta,
    })
}

/// One relaxation round: each violated tolerance becomes
/// `max(factor * delta_j, factor * |imbalance_j|)`.
pub fn relax_tolerances(delta: &[f64], imbalance: &[f64], max_violation: f64, factor: f64) -> Vec<f64> {
    let violated: Vec<bool> = delta
        .iter()
        .zip(imbalance)
        .map(|(d, b)| b.abs() - d > 1e-9 * d.max(1.0))
        .collect();
    let any = violated.iter().any(|v| *v);
    delta
        .iter()
        .zip(imbalance)
        .zip(&violated)
        .map(|((d, b), v)| {
            if *v {
                (factor * d).max(factor * b.abs())
            } else if !any && d.is_finite() {
                // The minimal-violation point sits on the boundary; widen all rows.
                (factor * d).max(max_violation.abs().max(1e-9))
            } else {
                *d
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relaxation_widens_violated_rows_only() {
        let out = relax_tolerances(&[0.1, 0.5], &[0.3, 0.2], 0.2, 1.2);
        assert!((out[0] - 0.36).abs() < 1e-15);
        assert_eq!(out[1], 0.5);
        let zero = relax_tolerances(&[0.0], &[0.25], 0.25, 1.2);
        assert!((zero[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn labels() {
        let c = EstimatorConfig::new(ToleranceSpec::uniform(0.0), 0.0);
        assert_eq!(c.estimator_label(), "SBW");
        let c = EstimatorConfig::new(ToleranceSpec::uniform(0.0), 0.2).with_augmentation(Some(AugmentationSpec::default()));
        assert_eq!(c.estimator_label(), "BC-HSBW");
        assert_eq!(c.adjustment_label(), "Unadjusted");
    }
}
