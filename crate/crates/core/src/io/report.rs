use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create, write_error};
use crate::balancing::{BalanceDiagnostics, StateWeight};
use crate::error::{Error, Result};
use crate::inference::{EffectEstimate, JackknifeTrace, PlaceboRow};
use crate::panel::RegionPanel;
use crate::simulation::MetricsRow;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let out = create(path)?;
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| write_error(path, e);
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `state_id, region_id, weight` for the treated regions.
pub fn write_weights(path: impl AsRef<Path>, panel: &RegionPanel, weights: &[f64]) -> Result<()> {
    let treated = panel.treated_indices();
    if treated.len() != weights.len() {
        return Err(Error::Domain("one weight per treated region required".into()));
    }
    write_csv(
        path.as_ref(),
        &strings(&["state_id", "region_id", "weight"]),
        treated.iter().zip(weights).map(|(&i, g)| {
            let (s, r) = panel.key(i);
            vec![s.to_string(), r.to_string(), format_float(*g)]
        }),
    )
}

pub fn write_balance(path: impl AsRef<Path>, diagnostics: &BalanceDiagnostics) -> Result<()> {
    write_csv(
        path.as_ref(),
        &strings(&["variable", "unweighted_diff", "weighted_diff", "unweighted_std", "weighted_std"]),
        diagnostics.rows.iter().map(|r| {
            vec![
                r.variable.clone(),
                format_float(r.unweighted_diff),
                format_float(r.weighted_diff),
                opt(r.unweighted_std),
                opt(r.weighted_std),
            ]
        }),
    )
}

pub fn write_state_summary(path: impl AsRef<Path>, states: &[StateWeight]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &strings(&["state_id", "positive", "negative", "net"]),
        states.iter().map(|s| {
            vec![
                s.state.clone(),
                format_float(s.positive),
                format_float(s.negative),
                format_float(s.net),
            ]
        }),
    )
}

pub fn write_folds(path: impl AsRef<Path>, trace: &JackknifeTrace) -> Result<()> {
    write_csv(
        path.as_ref(),
        &strings(&["state_id", "estimate", "relaxation_rounds", "recalibrated"]),
        trace.folds.iter().map(|f| {
            vec![
                f.state.clone(),
                format_float(f.estimate),
                f.relaxation_rounds.to_string(),
                f.recalibrated.to_string(),
            ]
        }),
    )
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &strings(&[
            "tau",
            "rho_x",
            "size_model",
            "input_set",
            "rho",
            "estimator",
            "bias",
            "var",
            "mse",
            "coverage",
            "ci_length",
            "n_effective",
        ]),
        rows.iter().map(|r| {
            vec![
                format_float(r.tau),
                format_float(r.rho_x),
                r.size_model.clone(),
                r.input_set.clone(),
                format_float(r.rho),
                r.estimator.clone(),
                format_float(r.bias),
                format_float(r.var),
                format_float(r.mse),
                opt(r.coverage),
                opt(r.ci_length),
                r.n_effective.to_string(),
            ]
        }),
    )
}

/// `adjustment, estimator, error_<year>..., rmse`.
pub fn write_placebo(path: impl AsRef<Path>, rows: &[PlaceboRow]) -> Result<()> {
    let years: Vec<u32> = rows.first().map(|r| r.errors.iter().map(|(y, _)| *y).collect()).unwrap_or_default();
    let mut header = strings(&["adjustment", "estimator"]);
    header.extend(years.iter().map(|y| format!("error_{y}")));
    header.push("rmse".into());
    write_csv(
        path.as_ref(),
        &header,
        rows.iter().map(|r| {
            let mut rec = vec![r.adjustment.clone(), r.estimator.clone()];
            rec.extend(r.errors.iter().map(|(_, e)| format_float(*e)));
            rec.push(format_float(r.rmse));
            rec
        }),
    )
}

/// Estimate JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub psi_hat: f64,
    pub psi1_hat: f64,
    pub psi0_hat: f64,
    pub var_psi1: Option<f64>,
    pub var_psi0: Option<f64>,
    pub se: Option<f64>,
    pub df: Option<usize>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// e.g. `-2.33 (-3.54, -1.11)`
    pub summary: String,
    pub adjustment: String,
    pub estimator: String,
    pub rho: f64,
    pub lambda: Option<f64>,
    pub relaxation_rounds: usize,
    pub trace: Option<JackknifeTrace>,
}

impl EstimateReport {
    pub fn new(estimate: &EffectEstimate, trace: Option<&JackknifeTrace>) -> Self {
        let summary = match estimate.ci {
            Some((lo, hi)) => format!("{:.2} ({lo:.2}, {hi:.2})", estimate.psi_hat),
            None => format!("{:.2}", estimate.psi_hat),
        };
        Self {
            psi_hat: estimate.psi_hat,
            psi1_hat: estimate.psi1_hat,
            psi0_hat: estimate.psi0_hat,
            var_psi1: estimate.var_psi1,
            var_psi0: estimate.var_psi0,
            se: estimate.standard_error(),
            df: estimate.df,
            ci_lo: estimate.ci.map(|c| c.0),
            ci_hi: estimate.ci.map(|c| c.1),
            summary,
            adjustment: String::new(),
            estimator: String::new(),
            rho: 0.0,
            lambda: None,
            relaxation_rounds: 0,
            trace: trace.cloned(),
        }
    }
}

pub fn write_estimate(path: impl AsRef<Path>, report: &EstimateReport) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, report).map_err(|e| write_error(path, e))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}
