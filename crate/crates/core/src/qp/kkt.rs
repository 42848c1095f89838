use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::problem::{BalanceProblem, Duals, WeightSolution};

/// Infinity-norm KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `|2 Omega gamma - sum 1 - Z balance - bounds|`.
    pub stationarity: f64,
    /// Worst of sum-to-one error, negative weight, and balance excess over tolerance.
    pub primal: f64,
    /// Worst negative bound multiplier.
    pub dual: f64,
    /// Worst of `|bounds_i gamma_i|` and `|balance_j| * slack_j`.
    pub complementarity: f64,
    /// True when the multipliers were estimated rather than supplied by the solver.
    pub estimated_duals: bool,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Residuals are measured against the solution's own multipliers when present;
/// otherwise multipliers are fitted by least squares on the near-active set.
pub fn kkt_residuals(problem: &BalanceProblem, solution: &WeightSolution) -> KktReport {
    let gamma = &solution.gamma;
    let (duals, estimated) = match &solution.duals {
        Some(d) => (d.clone(), false),
        None => (estimate_duals(problem, gamma, 1e-6), true),
    };
    let n = problem.units();
    let imbalance = problem.imbalance(gamma);

    let grad = problem.omega().mul_vec(gamma);
    let mut stationarity: f64 = 0.0;
    for i in 0..n {
        let mut r = 2.0 * grad[i] - duals.sum - duals.bounds[i];
        for j in 0..problem.covariates() {
            r -= duals.balance[j] * problem.z()[(i, j)];
        }
        stationarity = stationarity.max(r.abs());
    }

    let mut primal = (gamma.iter().sum::<f64>() - 1.0).abs();
    for g in gamma {
        primal = primal.max(-g);
    }
    for (imb, delta) in imbalance.iter().zip(problem.tolerance()) {
        primal = primal.max(imb.abs() - delta);
    }

    let dual = duals.bounds.iter().fold(0.0f64, |acc, m| acc.max(-m));

    let mut complementarity: f64 = 0.0;
    for (m, g) in duals.bounds.iter().zip(gamma) {
        complementarity = complementarity.max((m * g).abs());
    }
    for j in 0..problem.covariates() {
        let lambda = duals.balance[j];
        if lambda == 0.0 {
            continue;
        }
        let delta = problem.tolerance()[j];
        // Positive multiplier belongs to the lower bound, negative to the upper.
        let slack = if lambda > 0.0 {
            imbalance[j] + delta
        } else {
            delta - imbalance[j]
        };
        complementarity = complementarity.max((lambda * slack).abs());
    }

    KktReport {
        stationarity,
        primal: primal.max(0.0),
        dual,
        complementarity,
        estimated_duals: estimated,
    }
}

fn estimate_duals(problem: &BalanceProblem, gamma: &[f64], tol: f64) -> Duals {
    let n = problem.units();
    let q = problem.covariates();
    let imbalance = problem.imbalance(gamma);
    let pinned: Vec<usize> = (0..n).filter(|&i| gamma[i] <= tol).collect();
    let rows: Vec<usize> = (0..q)
        .filter(|&j| {
            let delta = problem.tolerance()[j];
            delta.is_finite() && imbalance[j].abs() >= delta - tol
        })
        .collect();
    let k = 1 + rows.len() + pinned.len();
    let mut design = DMatrix::zeros(n, k);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for (c, &j) in rows.iter().enumerate() {
            design[(i, 1 + c)] = problem.z()[(i, j)];
        }
    }
    for (c, &i) in pinned.iter().enumerate() {
        design[(i, 1 + rows.len() + c)] = 1.0;
    }
    let grad: Vec<f64> = problem.omega().mul_vec(gamma).iter().map(|g| 2.0 * g).collect();
    let rhs = DVector::from_column_slice(&grad);
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(k));

    let mut balance = vec![0.0; q];
    for (c, &j) in rows.iter().enumerate() {
        balance[j] = coef[1 + c];
    }
    let mut bounds = vec![0.0; n];
    for (c, &i) in pinned.iter().enumerate() {
        bounds[i] = coef[1 + rows.len() + c];
    }
    Duals {
        sum: coef[0],
        balance,
        bounds,
    }
}
