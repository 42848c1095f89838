//! Block-equicorrelated weight covariance.
//!
//! Units are partitioned into groups. Within a group every pair of units has
//! correlation `rho`; units in different groups are uncorrelated. Each block is
//! `(1 - rho) I + rho 11^T`, so quadratic forms, products and solves all run in
//! O(n) without materializing the matrix.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCorrelationMatrix {
    rho: f64,
    /// Dense group id per unit, numbered by first appearance.
    group_of: Vec<usize>,
    /// Unit indices in each group, ascending.
    members: Vec<Vec<usize>>,
}

impl BlockCorrelationMatrix {
    pub fn new<T: Eq + Hash>(group_labels: &[T], rho: f64) -> Result<Self> {
        check_rho(rho)?;
        if group_labels.is_empty() {
            return Err(Error::Domain("correlation matrix needs at least one unit".into()));
        }
        let mut ids: HashMap<&T, usize> = HashMap::new();
        let mut group_of = Vec::with_capacity(group_labels.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, label) in group_labels.iter().enumerate() {
            let next = ids.len();
            let g = *ids.entry(label).or_insert(next);
            if g == members.len() {
                members.push(Vec::new());
            }
            members[g].push(i);
            group_of.push(g);
        }
        Ok(Self {
            rho,
            group_of,
            members,
        })
    }

    /// Identity covariance (plain SBW): every unit its own group.
    pub fn identity(n: usize) -> Result<Self> {
        let labels: Vec<usize> = (0..n).collect();
        Self::new(&labels, 0.0)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_count(&self) -> usize {
        self.members.len()
    }

    pub fn group_of(&self, unit: usize) -> usize {
        self.group_of[unit]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Same grouping, different correlation.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self {
            rho,
            ..self.clone()
        })
    }

    /// The principal submatrix on `units` (indices into this matrix, any order).
    /// Unit `k` of the result corresponds to `units[k]`.
    pub fn restrict(&self, units: &[usize]) -> Self {
        let labels: Vec<usize> = units.iter().map(|&i| self.group_of[i]).collect();
        Self::new(&labels, self.rho).expect("restricting a valid matrix to a nonempty subset")
    }

    /// `x^T Omega x = sum_s [ (1 - rho) sum_c x_sc^2 + rho (sum_c x_sc)^2 ]`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut total = 0.0;
        for group in &self.members {
            let mut sum = 0.0;
            let mut squares = 0.0;
            for &i in group {
                sum += x[i];
                squares += x[i] * x[i];
            }
            total += (1.0 - self.rho) * squares + self.rho * sum * sum;
        }
        total
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let mut out = vec![0.0; x.len()];
        for group in &self.members {
            let sum: f64 = group.iter().map(|&i| x[i]).sum();
            for &i in group {
                out[i] = (1.0 - self.rho) * x[i] + self.rho * sum;
            }
        }
        out
    }

    /// `(Omega + shift I)^{-1} x`, blockwise Sherman-Morrison.
    pub fn solve_shifted(&self, x: &[f64], shift: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let a = 1.0 - self.rho + shift;
        let b = self.rho;
        let mut out = vec![0.0; x.len()];
        for group in &self.members {
            let p = group.len() as f64;
            let sum: f64 = group.iter().map(|&i| x[i]).sum();
            let c = b * sum / (a + b * p);
            for &i in group {
                out[i] = (x[i] - c) / a;
            }
        }
        out
    }

    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        self.solve_shifted(x, 0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.members.iter().any(|g| g.len() > 1) {
            1.0 - self.rho
        } else {
            1.0
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let largest = self.members.iter().map(Vec::len).max().unwrap_or(1);
        1.0 + (largest as f64 - 1.0) * self.rho
    }

    /// Dense copy; refuses anything above 2,000 units.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if n > 2000 {
            return Err(Error::Domain(format!(
                "refusing to materialize a {n}x{n} correlation matrix"
            )));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if self.group_of[i] == self.group_of[j] {
                self.rho
            } else {
                0.0
            }
        }))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Anything that can apply `Omega^{-1}` to a vector.
pub trait CovarianceSolve {
    fn dim(&self) -> usize;
    fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>>;
}

impl CovarianceSolve for BlockCorrelationMatrix {
    fn dim(&self) -> usize {
        BlockCorrelationMatrix::dim(self)
    }

    fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(b))
    }
}

impl CovarianceSolve for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let chol = self
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))?;
        let x = chol.solve(&nalgebra::DVector::from_column_slice(b));
        Ok(x.iter().copied().collect())
    }
}
