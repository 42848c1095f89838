use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::omega::BlockCorrelationMatrix;
use crate::error::{Error, Result};

/// `min gamma^T Omega gamma` subject to `|Z^T gamma - target| <= tolerance`,
/// `sum gamma = 1`, `gamma >= 0`.
///
/// An infinite tolerance drops that balance row entirely.
#[derive(Debug, Clone)]
pub struct BalanceProblem {
    /// Units in rows, covariates in columns.
    z: DMatrix<f64>,
    target: Vec<f64>,
    tolerance: Vec<f64>,
    omega: BlockCorrelationMatrix,
}

impl BalanceProblem {
    pub fn new(
        z: DMatrix<f64>,
        target: Vec<f64>,
        tolerance: Vec<f64>,
        omega: BlockCorrelationMatrix,
    ) -> Result<Self> {
        let (n, q) = z.shape();
        if n == 0 {
            return Err(Error::Domain("balance problem needs at least one unit".into()));
        }
        if target.len() != q || tolerance.len() != q {
            return Err(Error::Domain(format!(
                "covariate matrix has {q} columns but target has {} and tolerance {} entries",
                target.len(),
                tolerance.len()
            )));
        }
        if omega.dim() != n {
            return Err(Error::Domain(format!(
                "correlation matrix covers {} units, covariate matrix {n}",
                omega.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("covariate matrix has non-finite entries".into()));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("target has non-finite entries".into()));
        }
        if tolerance.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(Error::Domain("tolerances must be nonnegative".into()));
        }
        Ok(Self {
            z,
            target,
            tolerance,
            omega,
        })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn tolerance(&self) -> &[f64] {
        &self.tolerance
    }

    pub fn omega(&self) -> &BlockCorrelationMatrix {
        &self.omega
    }

    pub fn units(&self) -> usize {
        self.z.nrows()
    }

    pub fn covariates(&self) -> usize {
        self.z.ncols()
    }

    /// `Z^T gamma - target`.
    pub fn imbalance(&self, gamma: &[f64]) -> Vec<f64> {
        (0..self.covariates())
            .map(|j| {
                let col = self.z.column(j);
                col.iter().zip(gamma).map(|(z, g)| z * g).sum::<f64>() - self.target[j]
            })
            .collect()
    }

    /// Same problem with different tolerances.
    pub fn with_tolerance(&self, tolerance: Vec<f64>) -> Result<Self> {
        Self::new(self.z.clone(), self.target.clone(), tolerance, self.omega.clone())
    }

    pub fn objective(&self, gamma: &[f64]) -> f64 {
        self.omega.quadratic_form(gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Converged,
    /// Iteration caps hit; the returned weights are best effort.
    Relaxed,
    Infeasible,
}

/// Lagrange multipliers for the stationarity condition
/// `2 Omega gamma = sum * 1 + Z balance + bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub sum: f64,
    /// Zero for inactive or dropped rows; positive at the lower bound, negative at the upper.
    pub balance: Vec<f64>,
    /// Nonnegative multipliers of `gamma >= 0`.
    pub bounds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSolution {
    pub gamma: Vec<f64>,
    /// Units with strictly positive weight.
    pub active_set: Vec<usize>,
    pub imbalance: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub polish_passes: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duals: Option<Duals>,
    /// Largest balance-row violation beyond tolerance at the minimal-violation
    /// point; only set when feasibility was in doubt.
    pub max_violation: Option<f64>,
}

impl WeightSolution {
    /// Wrap externally computed weights (no multipliers).
    pub fn from_weights(problem: &BalanceProblem, gamma: Vec<f64>, status: SolveStatus) -> Self {
        let imbalance = problem.imbalance(&gamma);
        let objective = problem.objective(&gamma);
        let active_set = gamma
            .iter()
            .enumerate()
            .filter(|(_, g)| **g > 0.0)
            .map(|(i, _)| i)
            .collect();
        Self {
            gamma,
            active_set,
            imbalance,
            objective,
            status,
            iterations: 0,
            polish_passes: 0,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            duals: None,
            max_violation: None,
        }
    }

    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub max_polish_passes: usize,
    /// KKT residual target for the polished solution.
    pub tolerance: f64,
    /// ADMM residual level at which the first polish is attempted.
    pub loose_tolerance: f64,
    /// Violation beyond tolerance that declares the constraint set empty.
    pub infeasibility_threshold: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            max_polish_passes: 50,
            tolerance: 1e-8,
            loose_tolerance: 1e-4,
            infeasibility_threshold: 1e-6,
        }
    }
}
