//! Operator-splitting stage.
//!
//! Works on the rescaled variable `x = n gamma` with unit-norm constraint rows:
//! the sum row `1/sqrt(n)`, one row per finite-tolerance balance constraint,
//! and the identity for `x >= 0`. The linear system `Omega + (sigma + rho) I +
//! U R U^T` is a block-equicorrelated matrix plus a rank-(k+1) update, so every
//! iteration is O(n k) via Woodbury.

use nalgebra::{DMatrix, DVector};

use super::omega::BlockCorrelationMatrix;
use super::rows::BalanceRow;

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const EQUALITY_BOOST: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const ADAPT_EVERY: usize = 25;

pub(crate) struct Admm<'a> {
    omega: &'a BlockCorrelationMatrix,
    /// Unit-norm rows; index 0 is the sum row.
    rows: Vec<Vec<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    equality: Vec<bool>,
    /// Maps scaled row r >= 1 back to the balance row index.
    pub row_origin: Vec<usize>,
    rho: f64,
    factor: Woodbury,
    pub x: Vec<f64>,
    pub z_rows: Vec<f64>,
    pub y_rows: Vec<f64>,
    pub z_box: Vec<f64>,
    pub y_box: Vec<f64>,
    y_rows_prev: Vec<f64>,
    y_box_prev: Vec<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub check_infeasibility: bool,
}

pub(crate) enum Progress {
    Converged,
    MaybeInfeasible,
    IterationCap,
}

struct Woodbury {
    /// `D^{-1} u_r` for each row.
    d_inv_u: Vec<Vec<f64>>,
    small: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    shift: f64,
}

impl<'a> Admm<'a> {
    pub fn new(omega: &'a BlockCorrelationMatrix, balance: &[BalanceRow]) -> Self {
        let n = omega.dim();
        let sqrt_n = (n as f64).sqrt();
        let mut rows = vec![vec![1.0 / sqrt_n; n]];
        let mut lo = vec![sqrt_n];
        let mut hi = vec![sqrt_n];
        let mut equality = vec![true];
        let mut row_origin = vec![usize::MAX];
        for (b, row) in balance.iter().enumerate() {
            if row.scale == 0.0 {
                continue;
            }
            let s = row.scale * sqrt_n;
            rows.push(row.coef.iter().map(|c| c / s).collect());
            lo.push(row.lo * sqrt_n / row.scale);
            hi.push(row.hi * sqrt_n / row.scale);
            equality.push(row.is_equality());
            row_origin.push(b);
        }
        let m = rows.len();
        let rho = 0.1;
        let factor = Woodbury::new(omega, &rows, &equality, rho);
        Self {
            omega,
            rows,
            lo,
            hi,
            equality,
            row_origin,
            rho,
            factor,
            x: vec![1.0; n],
            z_rows: vec![0.0; m],
            y_rows: vec![0.0; m],
            z_box: vec![1.0; n],
            y_box: vec![0.0; n],
            y_rows_prev: vec![0.0; m],
            y_box_prev: vec![0.0; n],
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            check_infeasibility: true,
        }
    }

    fn row_penalty(&self, r: usize) -> f64 {
        if self.equality[r] {
            self.rho * EQUALITY_BOOST
        } else {
            self.rho
        }
    }

    /// Iterate until residuals drop below `eps` (absolute and relative) or the
    /// global cap is reached.
    pub fn run(&mut self, eps: f64, max_iterations: usize) -> Progress {
        let n = self.x.len();
        let m = self.rows.len();
        let mut rhs = vec![0.0; n];
        let mut z_tilde_rows = vec![0.0; m];
        while self.iterations < max_iterations {
            self.iterations += 1;
            self.y_rows_prev.copy_from_slice(&self.y_rows);
            self.y_box_prev.copy_from_slice(&self.y_box);

            for i in 0..n {
                rhs[i] = SIGMA * self.x[i] + self.rho * self.z_box[i] - self.y_box[i];
            }
            for r in 0..m {
                let coef = self.row_penalty(r) * self.z_rows[r] - self.y_rows[r];
                for (acc, u) in rhs.iter_mut().zip(&self.rows[r]) {
                    *acc += coef * u;
                }
            }
            let x_tilde = self.factor.solve(self.omega, &rhs);
            for r in 0..m {
                z_tilde_rows[r] = dot(&self.rows[r], &x_tilde);
            }

            for i in 0..n {
                self.x[i] = ALPHA * x_tilde[i] + (1.0 - ALPHA) * self.x[i];
                let relaxed = ALPHA * x_tilde[i] + (1.0 - ALPHA) * self.z_box[i];
                let z_new = (relaxed + self.y_box[i] / self.rho).max(0.0);
                self.y_box[i] += self.rho * (relaxed - z_new);
                self.z_box[i] = z_new;
            }
            for r in 0..m {
                let pen = self.row_penalty(r);
                let relaxed = ALPHA * z_tilde_rows[r] + (1.0 - ALPHA) * self.z_rows[r];
                let z_new = (relaxed + self.y_rows[r] / pen).clamp(self.lo[r], self.hi[r]);
                self.y_rows[r] += pen * (relaxed - z_new);
                self.z_rows[r] = z_new;
            }

            let check = self.iterations % 5 == 0 || self.iterations == 1;
            if !check {
                continue;
            }
            let (prim, prim_scale, dual, dual_scale) = self.residuals();
            self.primal_residual = prim;
            self.dual_residual = dual;
            if prim <= eps * (1.0 + prim_scale) && dual <= eps * (1.0 + dual_scale) {
                return Progress::Converged;
            }
            if self.iterations % ADAPT_EVERY == 0 {
                if self.check_infeasibility && self.infeasibility_certificate() {
                    return Progress::MaybeInfeasible;
                }
                let ratio = ((prim / prim_scale.max(1e-30)) / (dual / dual_scale.max(1e-30)).max(1e-30))
                    .sqrt();
                let proposed = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if proposed > 5.0 * self.rho || proposed < 0.2 * self.rho {
                    self.rho = proposed;
                    self.factor = Woodbury::new(self.omega, &self.rows, &self.equality, self.rho);
                }
            }
        }
        Progress::IterationCap
    }

    /// (primal, primal scale, dual, dual scale), infinity norms.
    fn residuals(&self) -> (f64, f64, f64, f64) {
        let n = self.x.len();
        let mut prim: f64 = 0.0;
        let mut ax_norm: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        for r in 0..self.rows.len() {
            let ax = dot(&self.rows[r], &self.x);
            prim = prim.max((ax - self.z_rows[r]).abs());
            ax_norm = ax_norm.max(ax.abs());
            z_norm = z_norm.max(self.z_rows[r].abs());
        }
        for i in 0..n {
            prim = prim.max((self.x[i] - self.z_box[i]).abs());
            ax_norm = ax_norm.max(self.x[i].abs());
            z_norm = z_norm.max(self.z_box[i].abs());
        }
        let px = self.omega.mul_vec(&self.x);
        let aty = self.a_transpose(&self.y_rows, &self.y_box);
        let mut dual: f64 = 0.0;
        let mut px_norm: f64 = 0.0;
        let mut aty_norm: f64 = 0.0;
        for i in 0..n {
            dual = dual.max((px[i] + aty[i]).abs());
            px_norm = px_norm.max(px[i].abs());
            aty_norm = aty_norm.max(aty[i].abs());
        }
        (prim, ax_norm.max(z_norm), dual, px_norm.max(aty_norm))
    }

    fn a_transpose(&self, y_rows: &[f64], y_box: &[f64]) -> Vec<f64> {
        let mut out = y_box.to_vec();
        for (row, y) in self.rows.iter().zip(y_rows) {
            for (o, u) in out.iter_mut().zip(row) {
                *o += y * u;
            }
        }
        out
    }

    /// Primal infeasibility test on the latest dual step.
    fn infeasibility_certificate(&self) -> bool {
        const EPS: f64 = 1e-7;
        let dy_rows: Vec<f64> = self
            .y_rows
            .iter()
            .zip(&self.y_rows_prev)
            .map(|(a, b)| a - b)
            .collect();
        let dy_box: Vec<f64> = self
            .y_box
            .iter()
            .zip(&self.y_box_prev)
            .map(|(a, b)| a - b)
            .collect();
        let norm = dy_rows
            .iter()
            .chain(&dy_box)
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if norm < 1e-12 {
            return false;
        }
        // Rows with no upper bound may not carry a positive step.
        if dy_box.iter().any(|&v| v > EPS * norm) {
            return false;
        }
        let aty = self.a_transpose(&dy_rows, &dy_box);
        if aty.iter().any(|v| v.abs() > EPS * norm) {
            return false;
        }
        let support: f64 = dy_rows
            .iter()
            .enumerate()
            .map(|(r, &d)| self.hi[r] * d.max(0.0) + self.lo[r] * d.min(0.0))
            .sum();
        support < -EPS * norm
    }

    /// Active-set guess for polishing: (free units, per-row state).
    pub fn active_guess(&self, balance_len: usize) -> (Vec<bool>, Vec<RowGuess>) {
        let free = self
            .z_box
            .iter()
            .zip(&self.y_box)
            .map(|(z, y)| z + y >= 0.0)
            .collect();
        let mut state = vec![RowGuess::Inactive; balance_len];
        for r in 1..self.rows.len() {
            let b = self.row_origin[r];
            state[b] = if self.equality[r] || self.z_rows[r] - self.lo[r] < -self.y_rows[r] {
                RowGuess::Lower
            } else if self.hi[r] - self.z_rows[r] < self.y_rows[r] {
                RowGuess::Upper
            } else {
                RowGuess::Inactive
            };
        }
        (free, state)
    }

    /// Current iterate as weights: clipped at zero and renormalized.
    pub fn weights(&self) -> Vec<f64> {
        let clipped: Vec<f64> = self.x.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        if total > 0.0 {
            clipped.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / self.x.len() as f64; self.x.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum RowGuess {
    Inactive,
    Lower,
    Upper,
}

impl Woodbury {
    fn new(omega: &BlockCorrelationMatrix, rows: &[Vec<f64>], equality: &[bool], rho: f64) -> Self {
        let shift = SIGMA + rho;
        let d_inv_u: Vec<Vec<f64>> = rows.iter().map(|u| omega.solve_shifted(u, shift)).collect();
        let m = rows.len();
        let mut small = DMatrix::zeros(m, m);
        for a in 0..m {
            let pen = if equality[a] { rho * EQUALITY_BOOST } else { rho };
            small[(a, a)] += 1.0 / pen;
            for b in 0..m {
                small[(a, b)] += dot(&rows[a], &d_inv_u[b]);
            }
        }
        let small = (&small + small.transpose()) * 0.5;
        let small = small
            .cholesky()
            .expect("Woodbury capacitance matrix is positive definite");
        Self {
            d_inv_u,
            small,
            shift,
        }
    }

    fn solve(&self, omega: &BlockCorrelationMatrix, rhs: &[f64]) -> Vec<f64> {
        let mut base = omega.solve_shifted(rhs, self.shift);
        // Rows of U^T D^{-1} b equal (D^{-1} u_r)^T b by symmetry of D.
        let t = DVector::from_iterator(
            self.d_inv_u.len(),
            self.d_inv_u.iter().map(|du| dot(du, rhs)),
        );
        let s = self.small.solve(&t);
        for (du, coef) in self.d_inv_u.iter().zip(s.iter()) {
            for (b, d) in base.iter_mut().zip(du) {
                *b -= coef * d;
            }
        }
        base
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
