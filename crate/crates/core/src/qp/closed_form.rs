use std::hash::Hash;

use nalgebra::{DMatrix, DVector};

use super::omega::{BlockCorrelationMatrix, CovarianceSolve};
use crate::error::{Error, Result};

/// Minimizer of `gamma^T Omega gamma` on the simplex with no balance rows:
/// `gamma_sc` proportional to `1 / ((p_s - 1) rho + 1)`.
pub fn closed_form_dispersion<T: Eq + Hash>(group_labels: &[T], rho: f64) -> Result<Vec<f64>> {
    let omega = BlockCorrelationMatrix::new(group_labels, rho)?;
    Ok(dispersion_weights(&omega))
}

pub(crate) fn dispersion_weights(omega: &BlockCorrelationMatrix) -> Vec<f64> {
    let sizes = omega.group_sizes();
    let raw: Vec<f64> = (0..omega.dim())
        .map(|i| 1.0 / ((sizes[omega.group_of(i)] as f64 - 1.0) * omega.rho() + 1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Minimum `gamma^T Omega gamma` weights with `sum gamma = 1` and exact balance
/// `Z^T gamma = v`, no sign restriction. These are the prediction weights of a
/// GLS regression of the outcome on `[1, Z]` evaluated at `v`.
///
/// `z` has units in rows. Fails with [`Error::RankDeficient`] naming the first
/// column (by index) that is collinear with the intercept and earlier columns.
pub fn least_norm_gls_weights<C: CovarianceSolve + ?Sized>(
    z: &DMatrix<f64>,
    v: &[f64],
    omega: &C,
) -> Result<Vec<f64>> {
    let names: Vec<String> = (0..z.ncols()).map(|j| format!("column {j}")).collect();
    least_norm_gls_weights_named(z, v, omega, &names)
}

/// As [`least_norm_gls_weights`], reporting rank problems by column name.
pub fn least_norm_gls_weights_named<C: CovarianceSolve + ?Sized>(
    z: &DMatrix<f64>,
    v: &[f64],
    omega: &C,
    names: &[String],
) -> Result<Vec<f64>> {
    let (n, q) = z.shape();
    if omega.dim() != n || v.len() != q || names.len() != q {
        return Err(Error::Domain(format!(
            "dimension mismatch: {n} units, {q} covariates, covariance of size {}, target of length {}",
            omega.dim(),
            v.len()
        )));
    }
    let ones_solved = omega.solve_vec(&vec![1.0; n])?;
    let total: f64 = ones_solved.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("1^T Omega^-1 1 is not positive".into()));
    }
    let center: Vec<f64> = (0..q)
        .map(|j| z.column(j).iter().zip(&ones_solved).map(|(a, b)| a * b).sum::<f64>() / total)
        .collect();
    let centered = DMatrix::from_fn(n, q, |i, j| z[(i, j)] - center[j]);
    let mut solved = DMatrix::zeros(n, q);
    for j in 0..q {
        let col: Vec<f64> = centered.column(j).iter().copied().collect();
        solved.set_column(j, &DVector::from_vec(omega.solve_vec(&col)?));
    }
    let gram = centered.transpose() * &solved;
    let gram = (&gram + gram.transpose()) * 0.5;
    let factor = checked_cholesky(&gram, names)?;
    let rhs = DVector::from_iterator(q, v.iter().zip(&center).map(|(a, b)| a - b));
    let coef = factor.solve(&rhs);
    let correction = &solved * coef;
    Ok((0..n).map(|i| correction[i] + ones_solved[i] / total).collect())
}

/// Cholesky that names the first column whose pivot collapses.
fn checked_cholesky(gram: &DMatrix<f64>, names: &[String]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let q = gram.nrows();
    let scale = (0..q).fold(0.0f64, |acc, j| acc.max(gram[(j, j)]));
    let mut lower = DMatrix::<f64>::zeros(q, q);
    for j in 0..q {
        let mut pivot = gram[(j, j)];
        for k in 0..j {
            pivot -= lower[(j, k)] * lower[(j, k)];
        }
        if !(pivot > 1e-10 * gram[(j, j)]) || !(pivot > 1e-14 * scale) {
            return Err(Error::RankDeficient {
                column: names[j].clone(),
            });
        }
        let root = pivot.sqrt();
        lower[(j, j)] = root;
        for i in (j + 1)..q {
            let mut s = gram[(i, j)];
            for k in 0..j {
                s -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = s / root;
        }
    }
    gram.clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient {
            column: names[q - 1].clone(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_one_and_three() {
        let w = closed_form_dispersion(&["a", "b", "b", "b"], 0.5).unwrap();
        for (got, want) in w.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rho_is_uniform() {
        let w = closed_form_dispersion(&[1, 1, 2, 3, 3, 3], 0.0).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn equal_groups_near_one() {
        let w = closed_form_dispersion(&[0, 0, 1, 1], 0.99).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn gls_midpoint() {
        let z = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let omega = BlockCorrelationMatrix::identity(2).unwrap();
        let w = least_norm_gls_weights(&z, &[1.0], &omega).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-14 && (w[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn gls_at_mean_is_uniform() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 3.0, 2.0, -1.0, 5.0, 0.5, -2.0, 4.0]);
        let mean: Vec<f64> = (0..2).map(|j| z.column(j).mean()).collect();
        let omega = BlockCorrelationMatrix::identity(4).unwrap();
        let w = least_norm_gls_weights(&z, &mean, &omega).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-14));
    }

    #[test]
    fn collinear_column_is_named() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let omega = BlockCorrelationMatrix::identity(3).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        match least_norm_gls_weights_named(&z, &[1.0, 2.0], &omega, &names) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "b"),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let constant = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 2.0]);
        assert!(matches!(
            least_norm_gls_weights(&constant, &[2.0], &omega),
            Err(Error::RankDeficient { .. })
        ));
    }
}
