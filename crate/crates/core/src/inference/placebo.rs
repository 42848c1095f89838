use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::oaxaca::{oaxaca_blinder_weights, RegressionMode};
use super::pipeline::{adjustment_label, fit_weights, EstimatorConfig};
use crate::balancing::{CovariateSource, ToleranceSpec};
use crate::calibration::{calibrate, AdjustmentKind, NoiseCovarianceSet};
use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// Year-specific columns are named `base@YYYY`; other columns are static.
pub const YEAR_SEPARATOR: char = '@';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceboWindow {
    pub train_years: Vec<u32>,
    pub target_year: u32,
}

#[derive(Debug, Clone)]
pub enum PlaceboEstimator {
    Weights(EstimatorConfig),
    Regression {
        mode: RegressionMode,
        rho: f64,
        adjustment: Option<AdjustmentKind>,
    },
}

impl PlaceboEstimator {
    fn labels(&self) -> (String, String) {
        match self {
            PlaceboEstimator::Weights(c) => (c.adjustment_label().into(), c.estimator_label().into()),
            PlaceboEstimator::Regression { mode, adjustment, .. } => (
                adjustment_label(*adjustment).into(),
                match mode {
                    RegressionMode::Ols => "OLS".into(),
                    RegressionMode::Gls => "GLS".into(),
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRow {
    pub adjustment: String,
    pub estimator: String,
    /// (target year, weighted treated minus control mean outcome)
    pub errors: Vec<(u32, f64)>,
    pub rmse: f64,
}

fn split_year(name: &str) -> Option<(&str, u32)> {
    let (base, year) = name.rsplit_once(YEAR_SEPARATOR)?;
    Some((base, year.parse().ok()?))
}

/// Predict a pre-treatment outcome year from earlier years. For every window,
/// weights are fit on the static columns plus the columns of the training
/// years, and the prediction error on `outcome@target_year` is reported.
pub fn placebo_validation(
    history: &RegionPanel,
    outcome: &str,
    windows: &[PlaceboWindow],
    estimators: &[PlaceboEstimator],
    noise: Option<&NoiseCovarianceSet>,
) -> Result<Vec<PlaceboRow>> {
    if windows.is_empty() {
        return Err(Error::Domain("no placebo windows given".into()));
    }
    let names = history.covariate_names();
    let years: BTreeSet<u32> = names.iter().filter_map(|n| split_year(n).map(|(_, y)| y)).collect();
    let mut prepared = Vec::new();
    for window in windows {
        if let Some(missing) = window.train_years.iter().find(|y| !years.contains(y)) {
            return Err(Error::Schema(format!("no columns for training year {missing}")));
        }
        let target_name = format!("{outcome}{YEAR_SEPARATOR}{}", window.target_year);
        let target_col = names
            .iter()
            .position(|n| *n == target_name)
            .ok_or_else(|| Error::Schema(format!("missing target outcome column '{target_name}'")))?;
        let cols: Vec<usize> = (0..names.len())
            .filter(|&j| match split_year(&names[j]) {
                None => true,
                Some((_, y)) => window.train_years.contains(&y),
            })
            .collect();
        let selected: Vec<String> = cols.iter().map(|&j| names[j].clone()).collect();
        let target_outcome: Vec<f64> = history.covariates().column(target_col).iter().copied().collect();
        let panel = history.select_covariates(&selected)?;
        let panel = panel.with_columns(
            selected.clone(),
            panel.covariates().clone(),
            target_outcome,
            panel.sample_sizes().cloned(),
        )?;
        let noise = noise.map(|n| n.select_columns(&cols)).transpose()?;
        prepared.push((window.target_year, panel, noise));
    }

    estimators
        .iter()
        .map(|est| {
            let (adjustment, estimator) = est.labels();
            let errors = prepared
                .iter()
                .map(|(year, panel, noise)| {
                    let weights = window_weights(panel, noise.as_ref(), est)?;
                    let y = panel.outcome();
                    let treated: f64 = weights.iter().zip(panel.treated_indices()).map(|(g, i)| g * y[i]).sum();
                    let control = panel.control_indices();
                    let control_mean = control.iter().map(|&i| y[i]).sum::<f64>() / control.len() as f64;
                    Ok((*year, treated - control_mean))
                })
                .collect::<Result<Vec<_>>>()?;
            let rmse = (errors.iter().map(|(_, e)| e * e).sum::<f64>() / errors.len() as f64).sqrt();
            Ok(PlaceboRow {
                adjustment,
                estimator,
                errors,
                rmse,
            })
        })
        .collect()
}

/// Tolerances for a window's columns: an exact entry, then the entry for the
/// column's base name, then the default.
fn window_tolerances(spec: &ToleranceSpec, names: &[String]) -> Result<ToleranceSpec> {
    let mut out = ToleranceSpec::new();
    for name in names {
        let base = split_year(name).and_then(|(b, _)| spec.entries().get(b).copied());
        if let Some(d) = spec.entries().get(name).copied().or(base).or_else(|| spec.get(name)) {
            out.set(name.clone(), d)?;
        }
    }
    Ok(out)
}

fn window_weights(panel: &RegionPanel, noise: Option<&NoiseCovarianceSet>, est: &PlaceboEstimator) -> Result<Vec<f64>> {
    match est {
        PlaceboEstimator::Weights(config) => {
            let mut config = config.clone();
            config.tolerances = window_tolerances(&config.tolerances, panel.covariate_names())?;
            Ok(fit_weights(panel, noise, &config, &panel.control_mean(), false)?.solution.gamma)
        }
        PlaceboEstimator::Regression { mode, rho, adjustment } => match adjustment {
            None => oaxaca_blinder_weights(panel, CovariateSource::Raw, *mode, *rho),
            Some(kind) => {
                let noise = noise.ok_or_else(|| {
                    Error::Schema(format!("{} adjustment needs noise covariances", kind.as_str()))
                })?;
                let calibrated = calibrate(panel, noise, *kind)?;
                oaxaca_blinder_weights(panel, CovariateSource::Calibrated(&calibrated), *mode, *rho)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_suffix() {
        assert_eq!(split_year("uninsured@2011"), Some(("uninsured", 2011)));
        assert_eq!(split_year("female"), None);
        assert_eq!(split_year("a@b"), None);
    }

    #[test]
    fn tolerances_fall_back_to_base_name() {
        let mut spec = ToleranceSpec::uniform(1.0);
        spec.set("uninsured", 0.05).unwrap();
        spec.set("uninsured@2010", 0.1).unwrap();
        let names: Vec<String> = ["uninsured@2009", "uninsured@2010", "female"].iter().map(|s| s.to_string()).collect();
        let out = window_tolerances(&spec, &names).unwrap();
        assert_eq!(out.resolve(&names).unwrap(), vec![0.05, 0.1, 1.0]);
    }
}
