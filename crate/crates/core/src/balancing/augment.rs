//! Ridge bias correction of balancing weights.
//!
//! `gamma_bc = gamma + Omega^-1 Zc (Zc^T Omega^-1 Zc + lambda I)^-1 (v - Z^T gamma)`,
//! where `Zc` is `Z` centered at its `Omega^-1`-weighted mean so the correction
//! sums to zero. The remaining imbalance is `lambda (M + lambda I)^-1 (Z^T gamma - v)`
//! with `M = Zc^T Omega^-1 Zc`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{CovarianceSolve, SolveStatus, WeightSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    Fixed(f64),
    /// Largest penalty on a log grid that meets the imbalance cap.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub lambda: Lambda,
    pub imbalance_cap: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            lambda: Lambda::Auto,
            imbalance_cap: 0.5,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.imbalance_cap > 0.0) {
            return Err(Error::Domain(format!("imbalance cap must be positive, got {}", self.imbalance_cap)));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Domain(format!("ridge penalty must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

/// One evaluated penalty on the search path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStep {
    pub lambda: f64,
    pub max_imbalance: f64,
    /// Euclidean norm of the remaining imbalance.
    pub imbalance_norm: f64,
    /// `sqrt(c^T Omega c)` for the correction `c`.
    pub correction_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub solution: WeightSolution,
    /// `None` when the base weights already met the cap.
    pub lambda: Option<f64>,
    pub trace: Vec<AugmentationStep>,
    pub negative_weights: usize,
}

const LAMBDA_MIN: f64 = 1e-8;
const LAMBDA_MAX: f64 = 1e8;
const BISECTIONS: usize = 60;

struct Corrector {
    /// `Omega^-1 Zc`, n x q.
    solved: DMatrix<f64>,
    /// `Zc^T Omega^-1 Zc`.
    gram: DMatrix<f64>,
    /// `Z^T gamma - v`.
    residual: DVector<f64>,
}

impl Corrector {
    fn new<C: CovarianceSolve + ?Sized>(gamma: &[f64], z: &DMatrix<f64>, v: &[f64], omega: &C) -> Result<Self> {
        let (n, q) = z.shape();
        let ones = omega.solve_vec(&vec![1.0; n])?;
        let total: f64 = ones.iter().sum();
        let center: Vec<f64> = (0..q)
            .map(|j| z.column(j).iter().zip(&ones).map(|(a, b)| a * b).sum::<f64>() / total)
            .collect();
        let centered = DMatrix::from_fn(n, q, |i, j| z[(i, j)] - center[j]);
        let mut solved = DMatrix::zeros(n, q);
        for j in 0..q {
            let col: Vec<f64> = centered.column(j).iter().copied().collect();
            solved.set_column(j, &DVector::from_vec(omega.solve_vec(&col)?));
        }
        let gram = centered.transpose() * &solved;
        let gram = (&gram + gram.transpose()) * 0.5;
        let g = DVector::from_column_slice(gamma);
        let residual = z.transpose() * g - DVector::from_column_slice(v);
        Ok(Self { solved, gram, residual })
    }

    /// (correction, remaining imbalance, Omega-norm of correction)
    fn at(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let q = self.gram.nrows();
        let system = &self.gram + DMatrix::identity(q, q) * lambda;
        let coef = system
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("ridge system singular at lambda {lambda:e}")))?
            .solve(&(-&self.residual));
        let correction = &self.solved * &coef;
        let remaining = &self.residual + &self.gram * &coef;
        let norm = coef.dot(&(&self.gram * &coef)).max(0.0).sqrt();
        Ok((correction, remaining, norm))
    }
}

/// Augment `base` so that imbalances shrink toward zero. `z` holds the treated
/// covariates (rows = units) and `omega` the weight covariance.
pub fn ridge_augment<C: CovarianceSolve + ?Sized>(
    base: &WeightSolution,
    z: &DMatrix<f64>,
    v: &[f64],
    omega: &C,
    spec: &AugmentationSpec,
) -> Result<Augmented> {
    spec.validate()?;
    if base.status == SolveStatus::Infeasible {
        return Err(Error::Domain("cannot augment an infeasible base solution".into()));
    }
    if z.nrows() != base.gamma.len() || z.ncols() != v.len() || omega.dim() != z.nrows() {
        return Err(Error::Domain("augmentation inputs have mismatched dimensions".into()));
    }
    let corrector = Corrector::new(&base.gamma, z, v, omega)?;
    let mut trace = Vec::new();
    let mut step = |lambda: f64| -> Result<(DVector<f64>, f64)> {
        let (correction, remaining, norm) = corrector.at(lambda)?;
        let max = remaining.amax();
        trace.push(AugmentationStep {
            lambda,
            max_imbalance: max,
            imbalance_norm: remaining.norm(),
            correction_norm: norm,
        });
        Ok((correction, max))
    };

    // Aim a hair inside the cap so recomputing the imbalance from the final
    // weights cannot land above it by rounding.
    let goal = spec.imbalance_cap * (1.0 - 1e-9);
    let lambda = match spec.lambda {
        Lambda::Fixed(l) => l,
        Lambda::Auto => {
            let base_max = corrector.residual.amax();
            if base_max <= spec.imbalance_cap {
                return Ok(finish(base, z, v, None, vec![0.0; base.gamma.len()], Vec::new()));
            }
            let (_, at_min) = step(LAMBDA_MIN)?;
            if at_min > goal {
                return Err(Error::AugmentationInfeasible {
                    cap: spec.imbalance_cap,
                    best: at_min,
                });
            }
            let (_, at_max) = step(LAMBDA_MAX)?;
            if at_max <= goal {
                LAMBDA_MAX
            } else {
                let (mut lo, mut hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
                for _ in 0..BISECTIONS {
                    let mid = 0.5 * (lo + hi);
                    let (_, max) = step(mid.exp())?;
                    if max <= goal {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo.exp()
            }
        }
    };
    let (correction, _) = step(lambda)?;
    let mut trace = trace;
    trace.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    trace.dedup_by(|a, b| a.lambda == b.lambda);
    Ok(finish(base, z, v, Some(lambda), correction.iter().copied().collect(), trace))
}

fn finish(
    base: &WeightSolution,
    z: &DMatrix<f64>,
    v: &[f64],
    lambda: Option<f64>,
    correction: Vec<f64>,
    trace: Vec<AugmentationStep>,
) -> Augmented {
    let gamma: Vec<f64> = base.gamma.iter().zip(&correction).map(|(g, c)| g + c).collect();
    let g = DVector::from_column_slice(&gamma);
    let imbalance: Vec<f64> = (z.transpose() * &g).iter().zip(v).map(|(a, b)| a - b).collect();
    let mut solution = base.clone();
    solution.active_set = (0..gamma.len()).filter(|&i| gamma[i] != 0.0).collect();
    solution.imbalance = imbalance;
    solution.duals = None;
    let negative_weights = gamma.iter().filter(|g| **g < 0.0).count();
    solution.gamma = gamma;
    Augmented {
        solution,
        lambda,
        trace,
        negative_weights,
    }
}
