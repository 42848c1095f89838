//! Regression calibration of noisy treated covariates.
//!
//! Each adjustment replaces a treated row `W_sc` by an estimate of
//! `E[X_sc | W]` under a linear-Gaussian measurement-error model:
//! `X_hat = W_bar + kappa^T (W - W_bar)` with `kappa = (Sigma_X + Sigma_nu)^-1 Sigma_X`.
//! The code evaluates the equivalent `W - Sigma_nu (Sigma_X + Sigma_nu)^-1 (W - W_bar)`,
//! which returns `W` exactly when the noise covariance is zero.

mod noise;

pub use noise::{replicate_noise_covariance, size_scaled_noise, NoiseCovarianceSet, ReplicateSet, REPLICATE_SCALE};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clamp_between, clip_psd, factor_spd, symmetrize};
use crate::panel::RegionPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjustmentKind {
    Homogeneous,
    Heterogeneous,
    Correlated,
}

impl AdjustmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdjustmentKind::Homogeneous => "homogeneous",
            AdjustmentKind::Heterogeneous => "heterogeneous",
            AdjustmentKind::Correlated => "correlated",
        }
    }
}

/// Shrinkage operator used by an adjustment.
#[derive(Debug, Clone, PartialEq)]
pub enum Kappa {
    Common(DMatrix<f64>),
    PerUnit(Vec<DMatrix<f64>>),
    /// State-block operator, determined by the noise and between-state covariances.
    Block {
        noise: DMatrix<f64>,
        between: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalCovariance {
    pub matrix: DMatrix<f64>,
    /// Empirical covariance of treated W (divisor n1).
    pub observed: DMatrix<f64>,
    /// Negative eigenvalues removed by the repair.
    pub clipped: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedCovariates {
    /// Rows follow the panel's treated ordering.
    pub x_hat: DMatrix<f64>,
    kind: AdjustmentKind,
    pub kappa: Kappa,
    pub signal_cov: DMatrix<f64>,
    pub treated_mean: Vec<f64>,
    pub between_cov: Option<DMatrix<f64>>,
    /// Ridge added before an inversion, if any was needed.
    pub ridge: Option<f64>,
    pub clipped: Vec<f64>,
}

impl CalibratedCovariates {
    pub fn kind(&self) -> AdjustmentKind {
        self.kind
    }
}

/// Empirical covariance of the treated rows with divisor `n1`.
pub fn treated_covariance(panel: &RegionPanel) -> DMatrix<f64> {
    let w = panel.treated_covariates();
    let n = w.nrows() as f64;
    let mean = column_mean(&w);
    let centered = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)] - mean[j]);
    symmetrize(&(centered.transpose() * &centered / n))
}

fn column_mean(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m.column(j).sum() / m.nrows() as f64).collect()
}

/// `Sigma_X = S_W - Sigma_nu`, with negative eigenvalues clipped to zero.
pub fn signal_covariance(panel: &RegionPanel, pooled_noise: &DMatrix<f64>) -> Result<SignalCovariance> {
    panel.require_groups(2, 0)?;
    let observed = treated_covariance(panel);
    if pooled_noise.shape() != observed.shape() {
        return Err(Error::Domain("noise covariance does not match the covariate count".into()));
    }
    let (matrix, clipped) = clip_psd(&(&observed - pooled_noise));
    if !clipped.is_empty() {
        log::info!("signal covariance: clipped eigenvalues {clipped:?}");
    }
    Ok(SignalCovariance {
        matrix,
        observed,
        clipped,
    })
}

/// Correction `Sigma_nu (Sigma_X + Sigma_nu)^-1 d` with ridge bookkeeping.
struct Shrinker {
    noise: DMatrix<f64>,
    factor: crate::linalg::SpdFactor,
}

impl Shrinker {
    fn new(signal: &DMatrix<f64>, noise: &DMatrix<f64>, what: &str) -> Result<Self> {
        let factor = factor_spd(&(signal + noise), what)?;
        Ok(Self {
            noise: noise.clone(),
            factor,
        })
    }

    fn apply(&self, w: &DVector<f64>, center: &DVector<f64>) -> DVector<f64> {
        w - &self.noise * self.factor.solve_vec(&(w - center))
    }

    fn kappa(&self, signal: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(signal)
    }
}

pub fn calibrate_homogeneous(
    panel: &RegionPanel,
    signal: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> Result<CalibratedCovariates> {
    panel.require_groups(2, 0)?;
    let w = panel.treated_covariates();
    let mean = DVector::from_vec(column_mean(&w));
    let shrink = Shrinker::new(signal, noise, "signal plus noise covariance")?;
    let x_hat = map_rows(&w, |row| shrink.apply(&row, &mean));
    Ok(CalibratedCovariates {
        x_hat,
        kind: AdjustmentKind::Homogeneous,
        kappa: Kappa::Common(shrink.kappa(signal)),
        signal_cov: signal.clone(),
        treated_mean: mean.iter().copied().collect(),
        between_cov: None,
        ridge: shrink.factor.ridge,
        clipped: Vec::new(),
    })
}

/// Per-region shrinkage with noise `Sigma_nu,sc` (one matrix per treated row).
pub fn calibrate_heterogeneous(
    panel: &RegionPanel,
    signal: &DMatrix<f64>,
    per_unit_noise: &[DMatrix<f64>],
) -> Result<CalibratedCovariates> {
    panel.require_groups(2, 0)?;
    let w = panel.treated_covariates();
    if per_unit_noise.len() != w.nrows() {
        return Err(Error::Domain("one noise covariance per treated region required".into()));
    }
    let mean = DVector::from_vec(column_mean(&w));
    let mut x_hat = w.clone();
    let mut kappas = Vec::with_capacity(w.nrows());
    let mut ridge = None;
    for (i, noise) in per_unit_noise.iter().enumerate() {
        let shrink = Shrinker::new(signal, noise, "signal plus unit noise covariance")?;
        ridge = ridge.or(shrink.factor.ridge);
        let row = w.row(i).transpose();
        x_hat.set_row(i, &shrink.apply(&row, &mean).transpose());
        kappas.push(shrink.kappa(signal));
    }
    Ok(CalibratedCovariates {
        x_hat,
        kind: AdjustmentKind::Heterogeneous,
        kappa: Kappa::PerUnit(kappas),
        signal_cov: signal.clone(),
        treated_mean: mean.iter().copied().collect(),
        between_cov: None,
        ridge,
        clipped: Vec::new(),
    })
}

/// Average within-state cross-product of treated rows centered at the treated
/// mean, over all ordered pairs of distinct regions in the same state.
pub fn between_state_covariance(panel: &RegionPanel) -> Result<DMatrix<f64>> {
    let w = panel.treated_covariates();
    let q = w.ncols();
    let mean = DVector::from_vec(column_mean(&w));
    let mut total = DMatrix::zeros(q, q);
    let mut pairs = 0usize;
    for members in panel.treated_groups().values() {
        let p = members.len();
        if p < 2 {
            continue;
        }
        let mut sum = DVector::zeros(q);
        let mut squares = DMatrix::zeros(q, q);
        for &i in members {
            let d = w.row(i).transpose() - &mean;
            squares += &d * d.transpose();
            sum += d;
        }
        total += &sum * sum.transpose() - squares;
        pairs += p * (p - 1);
    }
    if pairs == 0 {
        return Err(Error::Domain("between-state covariance needs a treated state with two regions".into()));
    }
    Ok(symmetrize(&(total / pairs as f64)))
}

/// Conditional mean of X given all W in the state, with exchangeable regions:
/// diagonal blocks `Sigma_X` (`Sigma_X + Sigma_nu` for W) and off-diagonal
/// blocks `Sigma_B`.
pub fn calibrate_correlated(
    panel: &RegionPanel,
    signal: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    between: &DMatrix<f64>,
) -> Result<CalibratedCovariates> {
    panel.require_groups(2, 0)?;
    let w = panel.treated_covariates();
    let q = w.ncols();
    let mean = DVector::from_vec(column_mean(&w));
    let within = symmetrize(&(signal + noise - between));
    let mut x_hat = w.clone();
    let mut ridge = None;
    // Without noise there is nothing to remove; the blocks need not be invertible.
    let states = if noise.iter().all(|x| *x == 0.0) {
        Default::default()
    } else {
        panel.treated_groups()
    };
    let within_factor = match factor_spd(&within, "within-state block") {
        Ok(f) => Some(f),
        Err(e) if states.values().any(|m| m.len() > 1) => {
            let state = states.iter().find(|(_, m)| m.len() > 1).map(|(s, _)| s.clone()).unwrap();
            return Err(Error::Numerical(format!("state {state}: {e}")));
        }
        Err(_) => None,
    };
    for (state, members) in &states {
        let p = members.len();
        let whole = symmetrize(&(&within + between * p as f64));
        let whole_factor =
            factor_spd(&whole, "state covariance block").map_err(|e| Error::Numerical(format!("state {state}: {e}")))?;
        ridge = ridge.or(whole_factor.ridge);
        let devs: Vec<DVector<f64>> = members.iter().map(|&i| w.row(i).transpose() - &mean).collect();
        let dbar = devs.iter().fold(DVector::zeros(q), |acc, d| acc + d) / p as f64;
        let common = whole_factor.solve_vec(&dbar);
        for (k, &i) in members.iter().enumerate() {
            let mut solved = common.clone();
            if let Some(f) = &within_factor {
                ridge = ridge.or(f.ridge);
                solved += f.solve_vec(&(&devs[k] - &dbar));
            }
            let row = w.row(i).transpose() - noise * solved;
            x_hat.set_row(i, &row.transpose());
        }
    }
    Ok(CalibratedCovariates {
        x_hat,
        kind: AdjustmentKind::Correlated,
        kappa: Kappa::Block {
            noise: noise.clone(),
            between: between.clone(),
        },
        signal_cov: signal.clone(),
        treated_mean: mean.iter().copied().collect(),
        between_cov: Some(between.clone()),
        ridge,
        clipped: Vec::new(),
    })
}

/// Full calibration from noise covariances: estimate `Sigma_X` from the panel,
/// then apply the requested adjustment. `noise` must cover the panel's treated
/// regions (it is restricted to them here).
pub fn calibrate(panel: &RegionPanel, noise: &NoiseCovarianceSet, kind: AdjustmentKind) -> Result<CalibratedCovariates> {
    let noise = noise.restrict_to(panel)?;
    let signal = signal_covariance(panel, &noise.pooled)?;
    let mut out = match kind {
        AdjustmentKind::Homogeneous => calibrate_homogeneous(panel, &signal.matrix, &noise.pooled)?,
        AdjustmentKind::Heterogeneous => {
            let sizes = panel
                .sample_sizes()
                .ok_or_else(|| Error::Schema("heterogeneous adjustment needs sample-size columns".into()))?;
            let treated_sizes = sizes.select_rows(&panel.treated_indices());
            let (_, per_unit) = size_scaled_noise(&noise.raw_per_unit, &treated_sizes)?;
            calibrate_heterogeneous(panel, &signal.matrix, &per_unit)?
        }
        AdjustmentKind::Correlated => {
            let (between, moved) = clamp_between(&between_state_covariance(panel)?, &signal.matrix);
            if moved > 0 {
                log::warn!("between-state covariance repaired: {moved} eigenvalues moved into [0, signal]");
            }
            calibrate_correlated(panel, &signal.matrix, &noise.pooled, &between)?
        }
    };
    if let Some(r) = out.ridge {
        log::info!("{} calibration: added ridge {r:e}", kind.as_str());
    }
    out.clipped = signal.clipped;
    Ok(out)
}

fn map_rows(m: &DMatrix<f64>, f: impl Fn(DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        out.set_row(i, &f(m.row(i).transpose()).transpose());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(states: &[&str], w: &[f64], q: usize) -> RegionPanel {
        let n = states.len();
        RegionPanel::new(
            (0..q).map(|j| format!("x{j}")).collect(),
            states.iter().map(|s| s.to_string()).collect(),
            (0..n).map(|i| format!("r{i}")).collect(),
            vec![true; n],
            vec![0.0; n],
            DMatrix::from_row_slice(n, q, w),
            None,
        )
        .unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn zero_noise_keeps_signal_equal_to_observed() {
        let p = panel(&["a", "b", "c"], &[1.0, 2.0, 6.0], 1);
        let s = signal_covariance(&p, &scalar(0.0)).unwrap();
        assert_eq!(s.matrix, s.observed);
        assert!(s.clipped.is_empty());
    }

    #[test]
    fn scalar_signal_subtraction() {
        // Values -1, 1 have divisor-n variance 1; scale to variance 2.
        let r = 2f64.sqrt();
        let p = panel(&["a", "b"], &[-r, r], 1);
        let s = signal_covariance(&p, &scalar(0.5)).unwrap();
        assert!((s.matrix[(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn negative_signal_is_clipped() {
        let r = 0.3f64.sqrt();
        let p = panel(&["a", "b"], &[-r, r], 1);
        let s = signal_covariance(&p, &scalar(0.5)).unwrap();
        assert_eq!(s.matrix[(0, 0)], 0.0);
        assert_eq!(s.clipped.len(), 1);
        assert!((s.clipped[0] + 0.2).abs() < 1e-14);
    }

    #[test]
    fn homogeneous_halves_deviation() {
        let p = panel(&["a", "b"], &[2.0, -2.0], 1);
        let c = calibrate_homogeneous(&p, &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((c.x_hat[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c.x_hat[(1, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_is_identity_for_all_kinds() {
        let p = panel(&["a", "a", "b", "c"], &[1.0, 3.0, 2.0, -1.0, 0.0, 4.0, 5.0, 1.0], 2);
        let signal = treated_covariance(&p);
        let zero = DMatrix::zeros(2, 2);
        let hom = calibrate_homogeneous(&p, &signal, &zero).unwrap();
        let het = calibrate_heterogeneous(&p, &signal, &vec![zero.clone(); 4]).unwrap();
        let between = between_state_covariance(&p).unwrap();
        let cor = calibrate_correlated(&p, &signal, &zero, &between).unwrap();
        let w = p.treated_covariates();
        assert_eq!(hom.x_hat, w);
        assert_eq!(het.x_hat, w);
        assert_eq!(cor.x_hat, w);
    }

    #[test]
    fn between_single_pair() {
        // State a holds (+1, +1), state b holds -2, so the treated mean is 0.
        let p = panel(&["a", "a", "b"], &[1.0, 1.0, -2.0], 1);
        let b = between_state_covariance(&p).unwrap();
        assert!((b[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn between_needs_a_pair() {
        let p = panel(&["a", "b"], &[1.0, 2.0], 1);
        assert!(matches!(between_state_covariance(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn correlated_two_region_block() {
        // Joint covariance of (W1, W2) is [[2, .5], [.5, 2]]; Cov(X, W) is [[1, .5], [.5, 1]].
        let p = panel(&["a", "a", "b", "c"], &[2.0, 0.0, 1.0, -3.0], 1);
        let c = calibrate_correlated(&p, &scalar(1.0), &scalar(1.0), &scalar(0.5)).unwrap();
        let joint_w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let cross = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let dev = nalgebra::DVector::from_vec(vec![2.0, 0.0]);
        let expected = cross * joint_w.try_inverse().unwrap() * dev;
        assert!((c.x_hat[(0, 0)] - expected[0]).abs() < 1e-14);
        assert!((c.x_hat[(1, 0)] - expected[1]).abs() < 1e-14);
        // A singleton state shrinks by Sigma_nu / (Sigma_X + Sigma_nu).
        assert!((c.x_hat[(2, 0)] - 0.5).abs() < 1e-14);
    }
}
