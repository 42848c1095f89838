use serde::{Deserialize, Serialize};

use super::config::{SimConfig, SizeModel};
use super::draw::{draw_population, draw_sample_and_observe, InputSet, Population, SimDraw};
use crate::balancing::ToleranceSpec;
use crate::error::{Error, Result};
use crate::inference::{fit_weights, jackknife_variance_at, EstimatorConfig};

/// A covariate input paired with the assumed within-state correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyEstimator {
    pub input: InputSet,
    pub rho: f64,
}

impl StudyEstimator {
    pub fn label(&self) -> &'static str {
        if self.rho > 0.0 {
            "H-SBW"
        } else {
            "SBW"
        }
    }

    fn config(&self) -> EstimatorConfig {
        EstimatorConfig::new(ToleranceSpec::uniform(0.0), self.rho).with_adjustment(self.input.adjustment())
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    /// Weighted treated outcome.
    pub estimate: f64,
    /// Leave-one-state-out variance, when requested and every fold succeeded.
    pub jackknife_variance: Option<f64>,
    pub fold_estimates: Vec<f64>,
}

/// Fit every estimator on one draw with exact balance at the configured target.
pub fn run_replicate(
    draw: &SimDraw,
    config: &SimConfig,
    estimators: &[StudyEstimator],
    jackknife: bool,
) -> Result<Vec<Result<ReplicateOutcome>>> {
    let noise = draw.noise_set()?;
    let mut out = Vec::with_capacity(estimators.len());
    for est in estimators {
        let panel = draw.panel(est.input)?;
        let cfg = est.config();
        let noise = est.input.adjustment().map(|_| &noise);
        let outcome = fit_weights(&panel, noise, &cfg, &config.target, false).and_then(|run| {
            let estimate: f64 = run.weights().iter().zip(panel.outcome()).map(|(g, y)| g * y).sum();
            let (jackknife_variance, fold_estimates) = if jackknife {
                match jackknife_variance_at(&panel, noise, &cfg, &config.target) {
                    Ok((v, trace)) => (Some(v), trace.estimates()),
                    Err(e) => {
                        log::warn!("{} rho={}: jackknife failed: {e}", est.input.label(), est.rho);
                        (None, Vec::new())
                    }
                }
            } else {
                (None, Vec::new())
            };
            Ok(ReplicateOutcome {
                estimate,
                jackknife_variance,
                fold_estimates,
            })
        });
        if let Err(e) = &outcome {
            log::warn!("{} rho={}: replication failed: {e}", est.input.label(), est.rho);
        }
        out.push(outcome);
    }
    Ok(out)
}

/// Per-cell seed from the base seed and the cell position.
pub fn cell_seed(base_seed: u64, cell: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base_seed.wrapping_add((cell as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw replication results for one cell; `outcomes[e][r]` is estimator `e` on
/// replication `r`.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub config: SimConfig,
    pub estimators: Vec<StudyEstimator>,
    pub outcomes: Vec<Vec<Option<ReplicateOutcome>>>,
}

/// Draw the population once, then `n_sims` samples from it.
pub fn run_cell(config: &SimConfig, cell: usize, estimators: &[StudyEstimator], jackknife: bool) -> Result<CellRun> {
    let seed = cell_seed(config.base_seed, cell);
    let population: Population = draw_population(config, seed)?;
    let mut outcomes = vec![Vec::with_capacity(config.n_sims); estimators.len()];
    for rep in 0..config.n_sims {
        let draw = draw_sample_and_observe(&population, config, seed, rep as u64 + 1)?;
        for (e, result) in run_replicate(&draw, config, estimators, jackknife)?.into_iter().enumerate() {
            outcomes[e].push(result.ok());
        }
    }
    Ok(CellRun {
        config: config.clone(),
        estimators: estimators.to_vec(),
        outcomes,
    })
}

/// One row of the long-format metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tau: f64,
    pub rho_x: f64,
    pub size_model: String,
    pub input_set: String,
    pub rho: f64,
    pub estimator: String,
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub ci_length: Option<f64>,
    pub n_effective: usize,
}

/// Bias, variance (divisor `n - 1`), MSE, interval coverage and length.
pub fn summarize(outcomes: &[Option<ReplicateOutcome>], truth: f64, z: f64) -> Metrics {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().flatten().collect();
    let n = ok.len();
    let failures = outcomes.len() - n;
    if n == 0 {
        return Metrics {
            bias: f64::NAN,
            var: f64::NAN,
            mse: f64::NAN,
            coverage: None,
            ci_length: None,
            n_effective: 0,
            failures,
        };
    }
    let mean = ok.iter().map(|o| o.estimate).sum::<f64>() / n as f64;
    let var = if n > 1 {
        ok.iter().map(|o| (o.estimate - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        f64::NAN
    };
    let mse = ok.iter().map(|o| (o.estimate - truth).powi(2)).sum::<f64>() / n as f64;
    let with_se: Vec<(f64, f64)> = ok
        .iter()
        .filter_map(|o| o.jackknife_variance.map(|v| (o.estimate, v.sqrt())))
        .collect();
    let (coverage, ci_length) = if with_se.is_empty() {
        (None, None)
    } else {
        let m = with_se.len() as f64;
        let covered = with_se.iter().filter(|(e, se)| (e - truth).abs() <= z * se).count();
        let length = with_se.iter().map(|(_, se)| 2.0 * z * se).sum::<f64>() / m;
        (Some(covered as f64 / m), Some(length))
    };
    Metrics {
        bias: mean - truth,
        var,
        mse,
        coverage,
        ci_length,
        n_effective: n,
        failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub ci_length: Option<f64>,
    pub n_effective: usize,
    pub failures: usize,
}

/// Cartesian design over noise level, covariate clustering and size model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyGrid {
    pub base: SimConfig,
    pub taus: Vec<f64>,
    pub rho_xs: Vec<f64>,
    pub size_models: Vec<SizeModel>,
    pub inputs: Vec<InputSet>,
    pub rhos: Vec<f64>,
    pub jackknife: bool,
    /// Normal quantile for interval coverage.
    pub z: f64,
}

impl Default for StudyGrid {
    fn default() -> Self {
        Self {
            base: SimConfig::default(),
            taus: vec![0.85, 0.9, 0.95],
            rho_xs: vec![0.0, 0.25, 0.5],
            size_models: vec![SizeModel::default(), SizeModel::Constant],
            inputs: InputSet::ALL.to_vec(),
            rhos: vec![0.0, 0.25, 0.5],
            jackknife: true,
            z: 1.959_963_984_540_054,
        }
    }
}

impl StudyGrid {
    pub fn cells(&self) -> Vec<SimConfig> {
        let mut cells = Vec::new();
        for size_model in &self.size_models {
            for &rho_x in &self.rho_xs {
                for &tau in &self.taus {
                    cells.push(SimConfig {
                        size_model: *size_model,
                        rho_x,
                        tau,
                        ..self.base.clone()
                    });
                }
            }
        }
        cells
    }

    pub fn estimators(&self) -> Vec<StudyEstimator> {
        self.inputs
            .iter()
            .flat_map(|&input| self.rhos.iter().map(move |&rho| StudyEstimator { input, rho }))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() || self.estimators().is_empty() {
            return Err(Error::Domain("simulation grid has no cells or no estimators".into()));
        }
        if self.rhos.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Domain("assumed correlations must lie in [0, 1)".into()));
        }
        if !(self.z > 0.0) {
            return Err(Error::Domain("interval quantile must be positive".into()));
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }
}

/// Every cell and estimator of the grid, summarized.
pub fn run_study(grid: &StudyGrid) -> Result<Vec<MetricsRow>> {
    grid.validate()?;
    let estimators = grid.estimators();
    let mut rows = Vec::new();
    for (index, cell) in grid.cells().iter().enumerate() {
        log::info!(
            "cell {index}: tau={} rho_x={} sizes={}",
            cell.tau,
            cell.rho_x,
            cell.size_model.label()
        );
        let run = run_cell(cell, index, &estimators, grid.jackknife)?;
        for (est, outcomes) in estimators.iter().zip(&run.outcomes) {
            let m = summarize(outcomes, cell.true_effect(), grid.z);
            if m.failures > 0 {
                log::warn!(
                    "cell {index} {} rho={}: {} of {} replications failed",
                    est.input.label(),
                    est.rho,
                    m.failures,
                    outcomes.len()
                );
            }
            rows.push(MetricsRow {
                tau: cell.tau,
                rho_x: cell.rho_x,
                size_model: cell.size_model.label().into(),
                input_set: est.input.label().into(),
                rho: est.rho,
                estimator: est.label().into(),
                bias: m.bias,
                var: m.var,
                mse: m.mse,
                coverage: m.coverage,
                ci_length: m.ci_length,
                n_effective: m.n_effective,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(estimate: f64, var: Option<f64>) -> Option<ReplicateOutcome> {
        Some(ReplicateOutcome {
            estimate,
            jackknife_variance: var,
            fold_estimates: Vec::new(),
        })
    }

    #[test]
    fn summary_by_hand() {
        let o = vec![outcome(2.0, Some(1.0)), outcome(4.0, Some(0.16)), None];
        let m = summarize(&o, 3.0, 2.0);
        assert_eq!(m.bias, 0.0);
        assert_eq!(m.var, 2.0);
        assert_eq!(m.mse, 1.0);
        assert_eq!(m.coverage, Some(0.5));
        assert!((m.ci_length.unwrap() - 2.8).abs() < 1e-15);
        assert_eq!((m.n_effective, m.failures), (2, 1));
    }

    #[test]
    fn grid_enumeration() {
        let g = StudyGrid::default();
        assert_eq!(g.cells().len(), 18);
        assert_eq!(g.estimators().len(), 15);
        assert_ne!(cell_seed(1, 0), cell_seed(1, 1));
    }
}
