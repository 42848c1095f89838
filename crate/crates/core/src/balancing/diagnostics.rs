use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub variable: String,
    /// Treated mean minus target.
    pub unweighted_diff: f64,
    /// Weighted treated mean minus target.
    pub weighted_diff: f64,
    /// Differences divided by the treated standard deviation; `None` for a
    /// constant column.
    pub unweighted_std: Option<f64>,
    pub weighted_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostics {
    pub rows: Vec<BalanceRow>,
    pub states: Vec<StateWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateWeight {
    pub state: String,
    /// Positive weight mass, out of 100.
    pub positive: f64,
    /// Negative weight mass (nonpositive), out of 100.
    pub negative: f64,
    pub net: f64,
}

/// Weighted and unweighted differences of the treated covariates `z` from the
/// target `v`, plus per-state weight shares.
pub fn balance_table(
    gamma: &[f64],
    z: &DMatrix<f64>,
    v: &[f64],
    names: &[String],
    state_labels: &[String],
) -> Result<BalanceDiagnostics> {
    let (n, q) = z.shape();
    if gamma.len() != n || v.len() != q || names.len() != q || state_labels.len() != n {
        return Err(Error::Domain("balance table inputs have mismatched dimensions".into()));
    }
    let rows = (0..q)
        .map(|j| {
            let col = z.column(j);
            let mean = col.sum() / n as f64;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let weighted: f64 = col.iter().zip(gamma).map(|(x, g)| x * g).sum();
            let unweighted_diff = mean - v[j];
            let weighted_diff = weighted - v[j];
            let standardize = |d: f64| if sd > 0.0 { Some(d / sd) } else { None };
            BalanceRow {
                variable: names[j].clone(),
                unweighted_diff,
                weighted_diff,
                unweighted_std: standardize(unweighted_diff),
                weighted_std: standardize(weighted_diff),
            }
        })
        .collect();
    Ok(BalanceDiagnostics {
        rows,
        states: state_weight_summary(gamma, state_labels)?,
    })
}

/// Weight mass per state on a 0-100 scale, sorted by state id.
pub fn state_weight_summary(gamma: &[f64], state_labels: &[String]) -> Result<Vec<StateWeight>> {
    if gamma.len() != state_labels.len() {
        return Err(Error::Domain("one state label per weight required".into()));
    }
    let total: f64 = gamma.iter().sum();
    if total.abs() < 1e-300 {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    let mut by_state: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (g, s) in gamma.iter().zip(state_labels) {
        let entry = by_state.entry(s).or_insert((0.0, 0.0));
        if *g >= 0.0 {
            entry.0 += g;
        } else {
            entry.1 += g;
        }
    }
    let scale = 100.0 / total;
    Ok(by_state
        .into_iter()
        .map(|(state, (pos, neg))| StateWeight {
            state: state.to_string(),
            positive: pos * scale,
            negative: neg * scale,
            net: (pos + neg) * scale,
        })
        .collect())
}
