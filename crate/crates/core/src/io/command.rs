use std::io::Write;
use std::path::{Path, PathBuf};

use super::bundle::{load_covariance_bundle, write_covariance_bundle, CovarianceBundle};
use super::config::{load_grid, load_tolerances};
use super::panel::{load_panel, write_panel_to};
use super::replicates::load_replicates;
use super::report::{
    format_float, write_balance, write_estimate, write_folds, write_metrics, write_placebo, write_state_summary,
    write_weights, EstimateReport,
};
use super::{create, write_error};
use crate::balancing::{balance_table, AugmentationSpec, AugmentationStep, ToleranceSpec};
use crate::calibration::{calibrate, replicate_noise_covariance, AdjustmentKind, NoiseCovarianceSet};
use crate::error::{Error, Result};
use crate::inference::{
    control_mean_variance, estimate_effect, fit_weights, placebo_validation, point_estimate, EstimatorConfig,
    PipelineRun, PlaceboEstimator, PlaceboWindow, RegressionMode,
};
use crate::panel::RegionPanel;
use crate::simulation::{run_study, StudyGrid};

#[derive(Debug, Clone)]
pub struct EstimateArgs {
    pub panel: PathBuf,
    pub replicates: Option<String>,
    pub noise_bundle: Option<PathBuf>,
    pub adjustment: Option<AdjustmentKind>,
    pub rho: f64,
    pub tolerances: Option<PathBuf>,
    pub default_tolerance: Option<f64>,
    pub augmentation: Option<AugmentationSpec>,
    pub jackknife: bool,
    pub replicate_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ValidateArgs {
    pub panel: PathBuf,
    pub replicates: Option<String>,
    pub noise_bundle: Option<PathBuf>,
    /// Base name of the year-suffixed outcome columns.
    pub outcome: String,
    pub train_years: Vec<u32>,
    /// Each target year shifts the training window by its offset from the first.
    pub target_years: Vec<u32>,
    pub adjustments: Vec<Option<AdjustmentKind>>,
    pub rhos: Vec<f64>,
    pub tolerances: Option<PathBuf>,
    pub default_tolerance: Option<f64>,
    pub augmentation: Option<AugmentationSpec>,
    /// Add OLS and GLS regression rows.
    pub regression: bool,
    pub replicate_scale: f64,
}

#[derive(Debug, Clone)]
pub enum Command {
    Calibrate {
        panel: PathBuf,
        replicates: String,
        adjustment: AdjustmentKind,
        replicate_scale: f64,
    },
    Weigh {
        covariates: PathBuf,
        rho: f64,
        tolerances: Option<PathBuf>,
        default_tolerance: Option<f64>,
        augmentation: Option<AugmentationSpec>,
    },
    Estimate(EstimateArgs),
    Validate(ValidateArgs),
    Simulate {
        grid: Option<PathBuf>,
        sims: Option<usize>,
        seed: Option<u64>,
        jackknife: Option<bool>,
    },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub out_dir: PathBuf,
}

/// Files written by a command, plus the decisions it logged.
#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub files: Vec<PathBuf>,
    pub log: Vec<String>,
    pub estimate: Option<EstimateReport>,
    pub weights: Option<Vec<f64>>,
}

impl ReportBundle {
    fn note(&mut self, line: String) {
        log::info!("{line}");
        self.log.push(line);
    }

    fn path(&mut self, dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        self.files.push(p.clone());
        p
    }
}

const LOG_FILE: &str = "run_log.txt";

pub fn run_command(config: &RunConfig) -> Result<ReportBundle> {
    let dir = config.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bundle = ReportBundle::default();
    match &config.command {
        Command::Calibrate {
            panel,
            replicates,
            adjustment,
            replicate_scale,
        } => run_calibrate(dir, panel, replicates, *adjustment, *replicate_scale, &mut bundle)?,
        Command::Weigh {
            covariates,
            rho,
            tolerances,
            default_tolerance,
            augmentation,
        } => {
            let panel = load_panel(covariates)?;
            let spec = tolerance_spec(tolerances.as_deref(), *default_tolerance)?;
            let cfg = EstimatorConfig::new(spec, *rho).with_augmentation(*augmentation);
            let run = fit_weights(&panel, None, &cfg, &panel.control_mean(), false)?;
            log_run(&run, &mut bundle);
            write_weight_reports(dir, &panel, &run, &mut bundle)?;
            bundle.weights = Some(run.solution.gamma);
        }
        Command::Estimate(args) => run_estimate(dir, args, &mut bundle)?,
        Command::Validate(args) => run_validate(dir, args, &mut bundle)?,
        Command::Simulate {
            grid,
            sims,
            seed,
            jackknife,
        } => {
            let mut grid = match grid {
                Some(p) => load_grid(p)?,
                None => StudyGrid::default(),
            };
            if let Some(n) = sims {
                grid.base.n_sims = *n;
            }
            if let Some(s) = seed {
                grid.base.base_seed = *s;
            }
            if let Some(j) = jackknife {
                grid.jackknife = *j;
            }
            grid.validate()?;
            let rows = run_study(&grid)?;
            for r in rows.iter().filter(|r| r.n_effective < grid.base.n_sims) {
                bundle.note(format!(
                    "tau={} rho_x={} {} {} rho={}: {} of {} replications usable",
                    r.tau, r.rho_x, r.size_model, r.input_set, r.rho, r.n_effective, grid.base.n_sims
                ));
            }
            let p = bundle.path(dir, "metrics.csv");
            write_metrics(&p, &rows)?;
        }
    }
    let p = bundle.path(dir, LOG_FILE);
    let mut out = create(&p)?;
    for line in &bundle.log {
        writeln!(out, "{line}").map_err(|e| Error::io(&p, e))?;
    }
    out.flush().map_err(|e| Error::io(&p, e))?;
    Ok(bundle)
}

fn run_calibrate(
    dir: &Path,
    panel_path: &Path,
    replicates: &str,
    kind: AdjustmentKind,
    scale: f64,
    bundle: &mut ReportBundle,
) -> Result<()> {
    let panel = load_panel(panel_path)?;
    let reps = load_replicates(replicates)?;
    bundle.note(format!("{} replicates loaded", reps.count()));
    let noise = replicate_noise_covariance(&reps, &panel, scale)?;
    let calibrated = calibrate(&panel, &noise, kind)?;
    note_calibration(&calibrated.clipped, calibrated.ridge, bundle);
    let mut covariates = panel.covariates().clone();
    for (pos, i) in panel.treated_indices().into_iter().enumerate() {
        covariates.set_row(i, &calibrated.x_hat.row(pos));
    }
    let adjusted = panel.with_columns(
        panel.covariate_names().to_vec(),
        covariates,
        panel.outcome().to_vec(),
        panel.sample_sizes().cloned(),
    )?;
    let p = bundle.path(dir, "calibrated.csv");
    let mut out = create(&p)?;
    write_panel_to(&adjusted, Some(kind.as_str()), &mut out).map_err(|e| write_error(&p, e))?;
    out.flush().map_err(|e| Error::io(&p, e))?;
    let p = bundle.path(dir, "covariance.json");
    write_covariance_bundle(
        &CovarianceBundle::new(panel.covariate_names().to_vec(), &noise, Some(&calibrated)),
        &p,
    )
}

fn run_estimate(dir: &Path, args: &EstimateArgs, bundle: &mut ReportBundle) -> Result<()> {
    let panel = load_panel(&args.panel)?;
    let noise = load_noise(
        &panel,
        args.adjustment.is_some(),
        args.replicates.as_deref(),
        args.noise_bundle.as_deref(),
        args.replicate_scale,
    )?;
    let spec = tolerance_spec(args.tolerances.as_deref(), args.default_tolerance)?;
    let cfg = EstimatorConfig::new(spec, args.rho)
        .with_adjustment(args.adjustment)
        .with_augmentation(args.augmentation);
    let (run, estimate, trace) = if args.jackknife {
        let full = estimate_effect(&panel, noise.as_ref(), &cfg)?;
        (full.run, full.estimate, Some(full.trace))
    } else {
        let run = fit_weights(&panel, noise.as_ref(), &cfg, &panel.control_mean(), false)?;
        let mut estimate = point_estimate(run.weights(), &panel)?;
        estimate.var_psi0 = Some(control_mean_variance(&panel)?);
        (run, estimate, None)
    };
    log_run(&run, bundle);
    if let Some(t) = &trace {
        for f in t.folds.iter().filter(|f| f.relaxation_rounds > 0) {
            bundle.note(format!(
                "fold without {}: tolerances relaxed {} rounds",
                f.state, f.relaxation_rounds
            ));
        }
    }
    let mut report = EstimateReport::new(&estimate, trace.as_ref());
    report.adjustment = cfg.adjustment_label().into();
    report.estimator = cfg.estimator_label().into();
    report.rho = cfg.rho;
    report.lambda = run.lambda;
    report.relaxation_rounds = run.relaxation_rounds;
    let p = bundle.path(dir, "estimate.json");
    write_estimate(&p, &report)?;
    write_weight_reports(dir, &panel, &run, bundle)?;
    if let Some(t) = &trace {
        let p = bundle.path(dir, "folds.csv");
        write_folds(&p, t)?;
    }
    bundle.weights = Some(run.solution.gamma);
    bundle.estimate = Some(report);
    Ok(())
}

fn run_validate(dir: &Path, args: &ValidateArgs, bundle: &mut ReportBundle) -> Result<()> {
    let panel = load_panel(&args.panel)?;
    let needs_noise = args.adjustments.iter().any(Option::is_some);
    let noise = load_noise(
        &panel,
        needs_noise,
        args.replicates.as_deref(),
        args.noise_bundle.as_deref(),
        args.replicate_scale,
    )?;
    let first = *args
        .target_years
        .first()
        .ok_or_else(|| Error::Domain("at least one target year is required".into()))?;
    let windows: Vec<PlaceboWindow> = args
        .target_years
        .iter()
        .map(|&t| PlaceboWindow {
            train_years: args.train_years.iter().map(|y| y + t - first).collect(),
            target_year: t,
        })
        .collect();
    if args.target_years.iter().any(|&t| t < first) {
        return Err(Error::Domain("target years must be listed in increasing order".into()));
    }
    let spec = tolerance_spec(args.tolerances.as_deref(), args.default_tolerance)?;
    let mut estimators = Vec::new();
    for &adjustment in &args.adjustments {
        for &rho in &args.rhos {
            let cfg = EstimatorConfig::new(spec.clone(), rho).with_adjustment(adjustment);
            estimators.push(PlaceboEstimator::Weights(cfg.clone()));
            if args.augmentation.is_some() {
                estimators.push(PlaceboEstimator::Weights(cfg.with_augmentation(args.augmentation)));
            }
        }
        if args.regression {
            estimators.push(PlaceboEstimator::Regression {
                mode: RegressionMode::Ols,
                rho: 0.0,
                adjustment,
            });
            if let Some(&rho) = args.rhos.iter().find(|r| **r > 0.0) {
                estimators.push(PlaceboEstimator::Regression {
                    mode: RegressionMode::Gls,
                    rho,
                    adjustment,
                });
            }
        }
    }
    let rows = placebo_validation(&panel, &args.outcome, &windows, &estimators, noise.as_ref())?;
    let p = bundle.path(dir, "placebo.csv");
    write_placebo(&p, &rows)
}

fn load_noise(
    panel: &RegionPanel,
    needed: bool,
    replicates: Option<&str>,
    noise_bundle: Option<&Path>,
    scale: f64,
) -> Result<Option<NoiseCovarianceSet>> {
    if !needed {
        return Ok(None);
    }
    match (replicates, noise_bundle) {
        (Some(r), _) => Ok(Some(replicate_noise_covariance(&load_replicates(r)?, panel, scale)?)),
        (None, Some(b)) => {
            let bundle = load_covariance_bundle(b)?;
            if bundle.columns != panel.covariate_names() {
                return Err(Error::Schema(format!(
                    "bundle columns {:?} differ from panel columns {:?}",
                    bundle.columns,
                    panel.covariate_names()
                )));
            }
            Ok(Some(bundle.noise_set()?))
        }
        (None, None) => Err(Error::Schema(
            "covariate adjustment needs replicates or a covariance bundle".into(),
        )),
    }
}

fn tolerance_spec(path: Option<&Path>, default: Option<f64>) -> Result<ToleranceSpec> {
    let spec = match path {
        Some(p) => load_tolerances(p)?,
        None => ToleranceSpec::new(),
    };
    Ok(match default {
        Some(d) => spec.with_default(d),
        None => spec,
    })
}

fn note_calibration(clipped: &[f64], ridge: Option<f64>, bundle: &mut ReportBundle) {
    if !clipped.is_empty() {
        bundle.note(format!(
            "signal covariance repaired: clipped eigenvalues {}",
            clipped.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(" ")
        ));
    }
    if let Some(r) = ridge {
        bundle.note(format!("calibration ridge {}", format_float(r)));
    }
}

fn log_run(run: &PipelineRun, bundle: &mut ReportBundle) {
    if let Some(c) = &run.calibrated {
        note_calibration(&c.clipped, c.ridge, bundle);
    }
    if run.relaxation_rounds > 0 {
        bundle.note(format!("tolerances relaxed {} rounds", run.relaxation_rounds));
    }
    if let Some(l) = run.lambda {
        bundle.note(format!("ridge augmentation penalty {}", format_float(l)));
    }
    bundle.note(format!("weight status {:?}", run.solution.status));
}

fn write_weight_reports(dir: &Path, panel: &RegionPanel, run: &PipelineRun, bundle: &mut ReportBundle) -> Result<()> {
    let gamma = run.weights();
    let p = bundle.path(dir, "weights.csv");
    write_weights(&p, panel, gamma)?;
    let diagnostics = balance_table(
        gamma,
        run.problem.z(),
        run.problem.target(),
        panel.covariate_names(),
        &panel.treated_state_labels(),
    )?;
    let p = bundle.path(dir, "balance.csv");
    write_balance(&p, &diagnostics)?;
    let p = bundle.path(dir, "state_summary.csv");
    write_state_summary(&p, &diagnostics.states)?;
    if !run.augmentation_trace.is_empty() {
        let p = bundle.path(dir, "augmentation.csv");
        write_augmentation(&p, &run.augmentation_trace)?;
    }
    Ok(())
}

fn write_augmentation(path: &Path, trace: &[AugmentationStep]) -> Result<()> {
    let out = create(path)?;
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| write_error(path, e);
    w.write_record(["lambda", "max_imbalance", "imbalance_norm", "correction_norm"])
        .map_err(wrap)?;
    for s in trace {
        w.write_record([
            format_float(s.lambda),
            format_float(s.max_imbalance),
            format_float(s.imbalance_norm),
            format_float(s.correction_norm),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
