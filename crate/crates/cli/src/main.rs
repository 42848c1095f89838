use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsbw::balancing::{AugmentationSpec, Lambda};
use hsbw::calibration::{AdjustmentKind, REPLICATE_SCALE};
use hsbw::io::{run_command, Command, EstimateArgs, RunConfig, ValidateArgs};

/// Balancing weights for clustered regions with noisy covariates.
#[derive(Parser, Debug)]
#[command(name = "hsbw", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Estimate noise covariances from replicates and calibrate treated covariates.
    Calibrate {
        #[arg(long)]
        panel: PathBuf,
        /// Glob of per-replicate CSVs, or one CSV with a replicate_index column.
        #[arg(long)]
        replicates: String,
        #[arg(long, value_enum)]
        adjustment: Kind,
        #[arg(long, default_value_t = REPLICATE_SCALE)]
        replicate_scale: f64,
    },
    /// Solve for balancing weights on a panel (raw or calibrated).
    Weigh {
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[command(flatten)]
        tolerance: ToleranceArgs,
        #[command(flatten)]
        augment: AugmentArgs,
    },
    /// Weights, effect estimate and (optionally) jackknife interval.
    Estimate {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "none")]
        adjustment: Adjustment,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[command(flatten)]
        tolerance: ToleranceArgs,
        #[command(flatten)]
        augment: AugmentArgs,
        #[arg(long)]
        jackknife: bool,
    },
    /// Placebo prediction of pre-treatment outcome years.
    Validate {
        #[command(flatten)]
        input: InputArgs,
        /// Base name of the year-suffixed outcome columns (`<name>@<year>`).
        #[arg(long, default_value = "outcome")]
        outcome: String,
        #[arg(long, value_delimiter = ',', required = true)]
        train_years: Vec<u32>,
        /// Later target years shift the training window by the same offset.
        #[arg(long, value_delimiter = ',', required = true)]
        target_year: Vec<u32>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "none")]
        adjustments: Vec<Adjustment>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        rhos: Vec<f64>,
        #[command(flatten)]
        tolerance: ToleranceArgs,
        #[command(flatten)]
        augment: AugmentArgs,
        /// Also report OLS and GLS regression predictions.
        #[arg(long)]
        regression: bool,
    },
    /// Run the simulation study.
    Simulate {
        /// TOML grid; defaults to the full design.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        sims: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_jackknife: bool,
    },
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, conflicts_with = "noise")]
    replicates: Option<String>,
    /// Covariance bundle written by `calibrate`.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, default_value_t = REPLICATE_SCALE)]
    replicate_scale: f64,
}

#[derive(Args, Debug)]
struct ToleranceArgs {
    /// CSV with `covariate,tolerance` rows.
    #[arg(long)]
    tol: Option<PathBuf>,
    /// Tolerance for covariates not in the file.
    #[arg(long)]
    default_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Ridge bias correction of the weights.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 0.5)]
    cap: f64,
    /// Fixed ridge penalty; searched when omitted.
    #[arg(long)]
    lambda: Option<f64>,
}

impl AugmentArgs {
    fn spec(&self) -> Option<AugmentationSpec> {
        self.augment.then(|| AugmentationSpec {
            lambda: self.lambda.map_or(Lambda::Auto, Lambda::Fixed),
            imbalance_cap: self.cap,
        })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Homogeneous,
    Heterogeneous,
    Correlated,
}

impl From<Kind> for AdjustmentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Homogeneous => AdjustmentKind::Homogeneous,
            Kind::Heterogeneous => AdjustmentKind::Heterogeneous,
            Kind::Correlated => AdjustmentKind::Correlated,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Adjustment {
    None,
    Homogeneous,
    Heterogeneous,
    Correlated,
}

impl Adjustment {
    fn kind(self) -> Option<AdjustmentKind> {
        match self {
            Adjustment::None => None,
            Adjustment::Homogeneous => Some(AdjustmentKind::Homogeneous),
            Adjustment::Heterogeneous => Some(AdjustmentKind::Heterogeneous),
            Adjustment::Correlated => Some(AdjustmentKind::Correlated),
        }
    }
}

fn command(sub: Sub) -> Command {
    match sub {
        Sub::Calibrate {
            panel,
            replicates,
            adjustment,
            replicate_scale,
        } => Command::Calibrate {
            panel,
            replicates,
            adjustment: adjustment.into(),
            replicate_scale,
        },
        Sub::Weigh {
            covariates,
            rho,
            tolerance,
            augment,
        } => Command::Weigh {
            covariates,
            rho,
            tolerances: tolerance.tol,
            default_tolerance: tolerance.default_tol,
            augmentation: augment.spec(),
        },
        Sub::Estimate {
            input,
            adjustment,
            rho,
            tolerance,
            augment,
            jackknife,
        } => Command::Estimate(EstimateArgs {
            panel: input.panel,
            replicates: input.replicates,
            noise_bundle: input.noise,
            adjustment: adjustment.kind(),
            rho,
            tolerances: tolerance.tol,
            default_tolerance: tolerance.default_tol,
            augmentation: augment.spec(),
            jackknife,
            replicate_scale: input.replicate_scale,
        }),
        Sub::Validate {
            input,
            outcome,
            train_years,
            target_year,
            adjustments,
            rhos,
            tolerance,
            augment,
            regression,
        } => Command::Validate(ValidateArgs {
            panel: input.panel,
            replicates: input.replicates,
            noise_bundle: input.noise,
            outcome,
            train_years,
            target_years: target_year,
            adjustments: adjustments.into_iter().map(Adjustment::kind).collect(),
            rhos,
            tolerances: tolerance.tol,
            default_tolerance: tolerance.default_tol,
            augmentation: augment.spec(),
            regression,
            replicate_scale: input.replicate_scale,
        }),
        Sub::Simulate {
            grid,
            sims,
            seed,
            no_jackknife,
        } => Command::Simulate {
            grid,
            sims,
            seed,
            jackknife: no_jackknife.then_some(false),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = RunConfig {
        command: command(cli.command),
        out_dir: cli.out,
    };
    match run_command(&config) {
        Ok(bundle) => {
            for f in &bundle.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
