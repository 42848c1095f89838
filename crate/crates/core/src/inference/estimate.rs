use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// Effect on the controls, in outcome units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    /// Weighted treated outcome.
    pub psi1_hat: f64,
    /// Unweighted control mean outcome.
    pub psi0_hat: f64,
    pub psi_hat: f64,
    pub var_psi1: Option<f64>,
    pub var_psi0: Option<f64>,
    pub df: Option<usize>,
    pub ci: Option<(f64, f64)>,
}

impl EffectEstimate {
    pub fn standard_error(&self) -> Option<f64> {
        Some((self.var_psi1? + self.var_psi0?).sqrt())
    }

    /// Fill `df` and `ci` with a t interval on `treated_states - 1` degrees of freedom.
    pub fn with_interval(mut self, treated_states: usize) -> Result<Self> {
        let ci = confidence_interval(&self, treated_states)?;
        self.df = Some(treated_states - 1);
        self.ci = Some(ci);
        Ok(self)
    }
}

/// `sum gamma J` over treated regions against the control mean of `J`.
pub fn point_estimate(weights: &[f64], panel: &RegionPanel) -> Result<EffectEstimate> {
    let treated = panel.treated_indices();
    let control = panel.control_indices();
    if weights.len() != treated.len() {
        return Err(Error::Domain(format!(
            "{} weights for {} treated regions",
            weights.len(),
            treated.len()
        )));
    }
    if control.is_empty() {
        return Err(Error::Domain("no control regions".into()));
    }
    let y = panel.outcome();
    let psi1_hat: f64 = weights.iter().zip(&treated).map(|(g, &i)| g * y[i]).sum();
    let psi0_hat = control.iter().map(|&i| y[i]).sum::<f64>() / control.len() as f64;
    Ok(EffectEstimate {
        psi1_hat,
        psi0_hat,
        psi_hat: psi1_hat - psi0_hat,
        var_psi1: None,
        var_psi0: None,
        df: None,
        ci: None,
    })
}

/// Two-sided 97.5% quantile of Student's t.
pub fn t_quantile(df: usize) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Domain(format!("t distribution with {df} degrees of freedom: {e}")))?;
    Ok(dist.inverse_cdf(0.975))
}

/// `psi_hat +/- t(0.975, m1 - 1) sqrt(var_psi1 + var_psi0)`.
pub fn confidence_interval(estimate: &EffectEstimate, treated_states: usize) -> Result<(f64, f64)> {
    if treated_states < 2 {
        return Err(Error::Domain(format!(
            "a t interval needs at least 2 treated states, got {treated_states}"
        )));
    }
    let se = estimate
        .standard_error()
        .ok_or_else(|| Error::Domain("both variance components must be set".into()))?;
    if !(se >= 0.0) {
        return Err(Error::Domain("variance components must be nonnegative".into()));
    }
    if se == 0.0 {
        return Ok((estimate.psi_hat, estimate.psi_hat));
    }
    let half = t_quantile(treated_states - 1)? * se;
    Ok((estimate.psi_hat - half, estimate.psi_hat + half))
}
