//! The balancing quadratic program
//! `min gamma^T Omega gamma` over `{sum gamma = 1, gamma >= 0, |Z^T gamma - v| <= delta}`.

mod admm;
mod closed_form;
mod feasibility;
mod kkt;
mod omega;
mod polish;
mod problem;
mod rows;

pub use closed_form::{closed_form_dispersion, least_norm_gls_weights, least_norm_gls_weights_named};
pub use feasibility::project_simplex;
pub use kkt::{kkt_residuals, KktReport};
pub use omega::{BlockCorrelationMatrix, CovarianceSolve};
pub use problem::{BalanceProblem, Duals, SolveStatus, SolverSettings, WeightSolution};

use admm::{Admm, Progress};
use rows::{balance_rows, BalanceRow};

/// Build the within-group equicorrelation matrix.
pub fn build_equicorrelated_omega<T: Eq + std::hash::Hash>(
    group_labels: &[T],
    rho: f64,
) -> crate::Result<BlockCorrelationMatrix> {
    BlockCorrelationMatrix::new(group_labels, rho)
}

pub fn solve_balance_qp(problem: &BalanceProblem) -> WeightSolution {
    solve_balance_qp_with(problem, &SolverSettings::default())
}

pub fn solve_balance_qp_with(problem: &BalanceProblem, settings: &SolverSettings) -> WeightSolution {
    let rows: Vec<BalanceRow> = balance_rows(problem)
        .into_iter()
        .filter(|r| r.scale > 0.0)
        .collect();
    let n = problem.units();

    if rows.is_empty() {
        let gamma = closed_form::dispersion_weights(problem.omega());
        let grad = problem.omega().mul_vec(&gamma);
        let mut solution = WeightSolution::from_weights(problem, gamma, SolveStatus::Converged);
        solution.duals = Some(Duals {
            sum: 2.0 * grad[0],
            balance: vec![0.0; problem.covariates()],
            bounds: vec![0.0; n],
        });
        solution.primal_residual = 0.0;
        solution.dual_residual = 0.0;
        return solution;
    }
    if n == 1 {
        let mut solution = WeightSolution::from_weights(problem, vec![1.0], SolveStatus::Converged);
        let excess = worst_excess(problem, &solution.imbalance);
        if excess > 0.0 {
            solution.status = SolveStatus::Infeasible;
            solution.max_violation = Some(excess);
        } else {
            solution.duals = Some(Duals {
                sum: 0.0,
                balance: vec![0.0; problem.covariates()],
                bounds: vec![2.0],
            });
            solution.primal_residual = 0.0;
            solution.dual_residual = 0.0;
        }
        return solution;
    }

    let mut admm = Admm::new(problem.omega(), &rows);
    let mut eps = settings.loose_tolerance;
    let mut polish_passes = 0;
    let mut infeasibility_checked = false;
    loop {
        let progress = admm.run(eps, settings.max_iterations);
        match progress {
            Progress::Converged => {
                if let Some(solution) = try_polish(problem, &rows, &admm, settings, &mut polish_passes) {
                    return solution;
                }
                if eps <= 1e-14 {
                    return fallback(problem, &rows, &admm, settings, polish_passes);
                }
                eps /= 10.0;
            }
            Progress::MaybeInfeasible => {
                if !infeasibility_checked {
                    infeasibility_checked = true;
                    let report = feasibility::minimal_violation(n, &rows, 20_000);
                    if report.max_violation > settings.infeasibility_threshold {
                        return infeasible(problem, report, &admm, polish_passes);
                    }
                }
                admm.check_infeasibility = false;
            }
            Progress::IterationCap => {
                if let Some(solution) = try_polish(problem, &rows, &admm, settings, &mut polish_passes) {
                    return solution;
                }
                return fallback(problem, &rows, &admm, settings, polish_passes);
            }
        }
    }
}

fn try_polish(
    problem: &BalanceProblem,
    rows: &[BalanceRow],
    admm: &Admm,
    settings: &SolverSettings,
    passes: &mut usize,
) -> Option<WeightSolution> {
    let (free, state) = admm.active_guess(rows.len());
    let polished = polish::polish(problem, rows, free, state, settings.max_polish_passes);
    let polished = polished?;
    *passes += polished.passes;
    let mut solution = WeightSolution::from_weights(problem, polished.gamma, SolveStatus::Converged);
    solution.duals = Some(polished.duals);
    solution.iterations = admm.iterations;
    solution.polish_passes = *passes;
    let report = kkt_residuals(problem, &solution);
    let dual_scale = solution
        .duals
        .as_ref()
        .map(|d| d.balance.iter().fold(d.sum.abs(), |acc, l| acc.max(l.abs())))
        .unwrap_or(0.0)
        .max(1.0);
    solution.primal_residual = report.primal;
    solution.dual_residual = report.stationarity.max(report.dual);
    if report.primal <= settings.tolerance
        && report.stationarity.max(report.dual).max(report.complementarity) <= settings.tolerance * dual_scale
    {
        Some(solution)
    } else {
        None
    }
}

fn fallback(
    problem: &BalanceProblem,
    rows: &[BalanceRow],
    admm: &Admm,
    settings: &SolverSettings,
    polish_passes: usize,
) -> WeightSolution {
    let report = feasibility::minimal_violation(problem.units(), rows, 20_000);
    if report.max_violation > settings.infeasibility_threshold {
        return infeasible(problem, report, admm, polish_passes);
    }
    log::warn!(
        "balance solve stopped at {} iterations without a polished optimum",
        admm.iterations
    );
    let mut solution = WeightSolution::from_weights(problem, admm.weights(), SolveStatus::Relaxed);
    solution.iterations = admm.iterations;
    solution.polish_passes = polish_passes;
    solution.primal_residual = admm.primal_residual;
    solution.dual_residual = admm.dual_residual;
    solution.max_violation = Some(report.max_violation);
    solution
}

fn infeasible(
    problem: &BalanceProblem,
    report: feasibility::ViolationReport,
    admm: &Admm,
    polish_passes: usize,
) -> WeightSolution {
    let mut solution = WeightSolution::from_weights(problem, report.gamma, SolveStatus::Infeasible);
    solution.iterations = admm.iterations;
    solution.polish_passes = polish_passes;
    solution.primal_residual = admm.primal_residual;
    solution.dual_residual = admm.dual_residual;
    solution.max_violation = Some(report.max_violation);
    solution
}

fn worst_excess(problem: &BalanceProblem, imbalance: &[f64]) -> f64 {
    imbalance
        .iter()
        .zip(problem.tolerance())
        .fold(0.0f64, |acc, (imb, delta)| acc.max(imb.abs() - delta))
}
