//! Small dense helpers for q x q covariance work.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const RIDGE: f64 = 1e-10;
pub const CONDITION_LIMIT: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clip negative eigenvalues to zero. Returns the repaired matrix and the
/// eigenvalues that were clipped.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let clipped: Vec<f64> = eig.eigenvalues.iter().copied().filter(|v| *v < 0.0).collect();
    if clipped.is_empty() {
        return (sym, clipped);
    }
    let values = eig.eigenvalues.map(|v| v.max(0.0));
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
    (symmetrize(&repaired), clipped)
}

/// Project `b` onto `0 <= b <= s` in the Loewner order, measured in the
/// metric of `s`. Returns the repaired matrix and how many generalized
/// eigenvalues were moved; `b` comes back untouched when none were.
pub fn clamp_between(b: &DMatrix<f64>, s: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = symmetrize(s).symmetric_eigen();
    let floor = eig.eigenvalues.amax() * 1e-12;
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let inv_root = eig.eigenvalues.map(|v| if v > floor { 1.0 / v.sqrt() } else { 0.0 });
    let v = &eig.eigenvectors;
    let half = v * DMatrix::from_diagonal(&root) * v.transpose();
    let inv_half = v * DMatrix::from_diagonal(&inv_root) * v.transpose();
    let rel = symmetrize(&(&inv_half * b * &inv_half)).symmetric_eigen();
    let moved = rel.eigenvalues.iter().filter(|x| **x < 0.0 || **x > 1.0).count();
    if moved == 0 {
        return (b.clone(), 0);
    }
    let values = rel.eigenvalues.map(|x| x.clamp(0.0, 1.0));
    let inner = &rel.eigenvectors * DMatrix::from_diagonal(&values) * rel.eigenvectors.transpose();
    (symmetrize(&(&half * inner * &half)), moved)
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(m).symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// A factored symmetric positive definite matrix, possibly after a ridge.
pub struct SpdFactor {
    pub factor: Cholesky<f64, Dyn>,
    pub ridge: Option<f64>,
}

impl SpdFactor {
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }
}

/// Factor `m`, adding a small ridge when it is badly conditioned.
/// `what` names the matrix in errors.
pub fn factor_spd(m: &DMatrix<f64>, what: &str) -> Result<SpdFactor> {
    let sym = symmetrize(m);
    let condition = condition_number(&sym);
    let (target, ridge) = if condition > CONDITION_LIMIT {
        let n = sym.nrows();
        (&sym + DMatrix::identity(n, n) * RIDGE, Some(RIDGE))
    } else {
        (sym, None)
    };
    let after = if ridge.is_some() { condition_number(&target) } else { condition };
    if !after.is_finite() || after > 1e2 * CONDITION_LIMIT {
        return Err(Error::Numerical(format!(
            "{what} is singular or indefinite (condition number {condition:e})"
        )));
    }
    let factor = target.cholesky().ok_or_else(|| {
        Error::Numerical(format!("{what} is not positive definite (condition number {condition:e})"))
    })?;
    Ok(SpdFactor { factor, ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_reports_negative_part() {
        let m = DMatrix::from_element(1, 1, -0.2);
        let (fixed, clipped) = clip_psd(&m);
        assert_eq!(fixed[(0, 0)], 0.0);
        assert_eq!(clipped, vec![-0.2]);
    }

    #[test]
    fn ridge_rescues_near_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        let f = factor_spd(&m, "test").unwrap();
        assert_eq!(f.ridge, Some(RIDGE));
        let indefinite = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(factor_spd(&indefinite, "bad"), Err(Error::Numerical(_))));
    }

    #[test]
    fn clamp_between_scalar_and_identity() {
        let s = DMatrix::from_element(1, 1, 4.0);
        assert_eq!(clamp_between(&DMatrix::from_element(1, 1, 1.0), &s).0[(0, 0)], 1.0);
        assert!((clamp_between(&DMatrix::from_element(1, 1, 9.0), &s).0[(0, 0)] - 4.0).abs() < 1e-12);
        assert!(clamp_between(&DMatrix::from_element(1, 1, -2.0), &s).0[(0, 0)].abs() < 1e-12);
        let b = DMatrix::from_row_slice(2, 2, &[0.45, -0.5, -0.5, 0.09]);
        let s = DMatrix::from_row_slice(2, 2, &[1.37, -0.17, -0.17, 1.09]);
        let (fixed, moved) = clamp_between(&b, &s);
        assert_eq!(moved, 1);
        assert!(fixed.symmetric_eigenvalues().min() > -1e-12);
        assert!((&s - &fixed).symmetric_eigenvalues().min() > -1e-12);
    }
}
