//! Active-set polishing.
//!
//! Given a guess of which weights are pinned at zero and which balance rows sit
//! on a bound, solve the equality-constrained problem on the free units exactly
//! and check every KKT sign condition. Violations update the guess
//! (primal-dual active set iteration) until it is consistent or passes run out.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use super::admm::{dot, RowGuess};
use super::problem::{BalanceProblem, Duals};
use super::rows::BalanceRow;

pub(crate) struct Polished {
    pub gamma: Vec<f64>,
    pub duals: Duals,
    pub passes: usize,
}

pub(crate) fn polish(
    problem: &BalanceProblem,
    rows: &[BalanceRow],
    mut free: Vec<bool>,
    mut state: Vec<RowGuess>,
    max_passes: usize,
) -> Option<Polished> {
    let n = problem.units();
    let omega = problem.omega();
    let coef_scale = rows
        .iter()
        .flat_map(|r| r.coef.iter())
        .fold(1.0f64, |acc, c| acc.max(c.abs()));
    let mut seen: HashSet<(Vec<bool>, Vec<RowGuess>)> = HashSet::new();

    for i in 0..rows.len() {
        if rows[i].scale == 0.0 {
            state[i] = RowGuess::Inactive;
        } else if rows[i].is_equality() {
            state[i] = RowGuess::Lower;
        }
    }

    for pass in 1..=max_passes {
        if !seen.insert((free.clone(), state.clone())) {
            return None;
        }
        let free_idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if free_idx.is_empty() {
            return None;
        }
        let omega_f = omega.restrict(&free_idx);

        // Equality system: sum row first, then active balance rows.
        let mut eq_coef: Vec<Vec<f64>> = vec![vec![1.0; free_idx.len()]];
        let mut eq_rhs = vec![1.0];
        let mut eq_row: Vec<Option<usize>> = vec![None];
        for (b, row) in rows.iter().enumerate() {
            let rhs = match state[b] {
                RowGuess::Inactive => continue,
                RowGuess::Lower => row.lo,
                RowGuess::Upper => row.hi,
            };
            eq_coef.push(free_idx.iter().map(|&i| row.coef[i]).collect());
            eq_rhs.push(rhs);
            eq_row.push(Some(b));
        }
        let k = eq_coef.len();
        let solved: Vec<Vec<f64>> = eq_coef.iter().map(|e| omega_f.solve(e)).collect();
        let gram = DMatrix::from_fn(k, k, |a, b| dot(&eq_coef[a], &solved[b]));
        let gram = (&gram + gram.transpose()) * 0.5;
        let w = gram.clone().cholesky()?.solve(&DVector::from_column_slice(&eq_rhs));
        if w.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let mut gamma = vec![0.0; n];
        for (slot, &i) in free_idx.iter().enumerate() {
            gamma[i] = solved.iter().zip(w.iter()).map(|(s, wk)| s[slot] * wk).sum();
        }
        let lambda: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();

        // Bound multipliers from stationarity: mu = 2 Omega gamma - E^T lambda.
        let grad: Vec<f64> = omega.mul_vec(&gamma).iter().map(|v| 2.0 * v).collect();
        let mut mu: Vec<f64> = grad.iter().map(|g| g - lambda[0]).collect();
        for (slot, b) in eq_row.iter().enumerate().skip(1) {
            let b = b.expect("balance row");
            for (m, c) in mu.iter_mut().zip(&rows[b].coef) {
                *m -= lambda[slot] * c;
            }
        }

        let grad_scale = grad.iter().fold(1e-300f64, |acc, g| acc.max(g.abs()));
        let tol_gamma = 1e-13;
        let tol_mu = 1e-11 * grad_scale;
        let tol_row = 1e-11 * coef_scale;

        let mut changed = false;
        let mut optimal = true;
        for i in 0..n {
            if free[i] && gamma[i] < -tol_gamma {
                free[i] = false;
                changed = true;
                optimal = false;
            } else if !free[i] && mu[i] < -tol_mu {
                free[i] = true;
                changed = true;
                optimal = false;
            }
        }
        let mut row_lambda = vec![0.0; rows.len()];
        for (slot, b) in eq_row.iter().enumerate().skip(1) {
            row_lambda[b.expect("balance row")] = lambda[slot];
        }
        for (b, row) in rows.iter().enumerate() {
            if row.scale == 0.0 || row.is_equality() {
                continue;
            }
            match state[b] {
                RowGuess::Inactive => {
                    let value = row.value(&gamma);
                    if value < row.lo - tol_row {
                        state[b] = RowGuess::Lower;
                        changed = true;
                        optimal = false;
                    } else if value > row.hi + tol_row {
                        state[b] = RowGuess::Upper;
                        changed = true;
                        optimal = false;
                    }
                }
                RowGuess::Lower if row_lambda[b] < -tol_mu * coef_scale => {
                    state[b] = RowGuess::Inactive;
                    changed = true;
                    optimal = false;
                }
                RowGuess::Upper if row_lambda[b] > tol_mu * coef_scale => {
                    state[b] = RowGuess::Inactive;
                    changed = true;
                    optimal = false;
                }
                _ => {}
            }
        }

        if optimal {
            let mut balance = vec![0.0; problem.covariates()];
            let mut sum = lambda[0];
            for (b, row) in rows.iter().enumerate() {
                balance[row.column] = row_lambda[b];
                sum -= row_lambda[b] * problem.target()[row.column];
            }
            let bounds = (0..n).map(|i| if free[i] { 0.0 } else { mu[i] }).collect();
            return Some(Polished {
                gamma,
                duals: Duals {
                    sum,
                    balance,
                    bounds,
                },
                passes: pass,
            });
        }
        if !changed {
            return None;
        }
    }
    None
}
