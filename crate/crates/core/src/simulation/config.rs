use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of the survey sample size behind each region's estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SizeModel {
    /// Every region has the same noise variance.
    Constant,
    /// Sizes uniform on `[low, high]`; noise variance inversely proportional to size.
    Uniform { low: f64, high: f64 },
}

impl SizeModel {
    pub fn label(&self) -> &'static str {
        match self {
            SizeModel::Constant => "constant",
            SizeModel::Uniform { .. } => "uniform",
        }
    }

    /// `E[1/r]`.
    pub fn mean_inverse_size(&self) -> f64 {
        match *self {
            SizeModel::Constant => 1.0,
            SizeModel::Uniform { low, high } => (high / low).ln() / (high - low),
        }
    }
}

impl Default for SizeModel {
    fn default() -> Self {
        SizeModel::Uniform {
            low: 300.0,
            high: 2300.0,
        }
    }
}

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub population_states: usize,
    pub sampled_states: usize,
    /// Rate of the exponential in `floor(Exp(rate) + min_regions)`.
    pub exp_rate: f64,
    pub min_regions: usize,
    pub sigma2_x: f64,
    /// Correlation between different covariates.
    pub cor_x: f64,
    /// Within-state correlation of each covariate.
    pub rho_x: f64,
    /// Within-state correlation of the outcome errors.
    pub rho_star: f64,
    /// Signal fraction `sigma2_x / (sigma2_x + sigma2_nu)`.
    pub tau: f64,
    pub size_model: SizeModel,
    pub n_sims: usize,
    pub base_seed: u64,
    pub target: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    /// State plus region plus outcome-noise variance.
    pub outcome_variance: f64,
    /// Variance of each per-region noise-variance estimate around its truth.
    pub noise_estimate_variance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population_states: 5000,
            sampled_states: 25,
            exp_rate: 0.1,
            min_regions: 10,
            sigma2_x: 2.0,
            cor_x: 0.25,
            rho_x: 0.0,
            rho_star: 0.25,
            tau: 0.9,
            size_model: SizeModel::default(),
            n_sims: 500,
            base_seed: 20_240_601,
            target: vec![1.0; 3],
            beta: vec![1.0; 3],
            alpha: 0.0,
            outcome_variance: 4.0,
            noise_estimate_variance: 0.45,
        }
    }
}

impl SimConfig {
    pub fn covariates(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.covariates();
        let fail = |m: String| Err(Error::Domain(m));
        if q == 0 || self.target.len() != q {
            return fail(format!("beta has {q} entries, target {}", self.target.len()));
        }
        if !(self.sigma2_x > 0.0) {
            return fail(format!("sigma2_x must be positive, got {}", self.sigma2_x));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.rho_x) {
            return fail(format!("rho_x must lie in [0, 1], got {}", self.rho_x));
        }
        let lower = if q > 1 { -1.0 / (q as f64 - 1.0) } else { -1.0 };
        if !(self.cor_x > lower && self.cor_x < 1.0) {
            return fail(format!("cor_x {} makes the covariate covariance singular or indefinite", self.cor_x));
        }
        if !(0.0..1.0).contains(&self.rho_star) {
            return fail(format!("rho_star must lie in [0, 1), got {}", self.rho_star));
        }
        if self.sampled_states < 2 || self.sampled_states > self.population_states {
            return fail(format!(
                "cannot sample {} of {} states",
                self.sampled_states, self.population_states
            ));
        }
        if !(self.exp_rate > 0.0) || self.min_regions == 0 {
            return fail("region counts need a positive rate and at least one region".into());
        }
        if let SizeModel::Uniform { low, high } = self.size_model {
            if !(low > 0.0 && high > low) {
                return fail(format!("size range [{low}, {high}] is invalid"));
            }
        }
        if !(self.noise_estimate_variance >= 0.0) {
            return fail("noise estimate variance must be nonnegative".into());
        }
        if self.region_error_variance() < 0.0 {
            return fail(format!(
                "outcome variance {} is too small for state variance {} plus noise {}",
                self.outcome_variance,
                self.state_error_variance(),
                self.noise_variance()
            ));
        }
        Ok(())
    }

    /// Average covariate noise variance implied by `tau`.
    pub fn noise_variance(&self) -> f64 {
        self.sigma2_x * (1.0 / self.tau - 1.0)
    }

    /// Size-model numerator: noise variance of a region is this over its size.
    pub fn common_noise_variance(&self) -> f64 {
        self.noise_variance() / self.size_model.mean_inverse_size()
    }

    pub fn state_error_variance(&self) -> f64 {
        self.rho_star * self.outcome_variance
    }

    pub fn region_error_variance(&self) -> f64 {
        (1.0 - self.rho_star) * self.outcome_variance - self.noise_variance()
    }

    /// Total covariate covariance: `sigma2_x` on the diagonal, `cor_x * sigma2_x` off it.
    pub fn covariate_covariance(&self) -> DMatrix<f64> {
        let q = self.covariates();
        DMatrix::from_fn(q, q, |i, j| if i == j { self.sigma2_x } else { self.cor_x * self.sigma2_x })
    }

    /// Between-state part of the covariate covariance.
    pub fn between_covariance(&self) -> DMatrix<f64> {
        self.covariate_covariance() * self.rho_x
    }

    /// Within-state part of the covariate covariance.
    pub fn within_covariance(&self) -> DMatrix<f64> {
        self.covariate_covariance() * (1.0 - self.rho_x)
    }

    /// `alpha + target^T beta`.
    pub fn true_effect(&self) -> f64 {
        self.alpha + self.target.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Expected bias of balancing on the noisy covariates:
/// `target^T (kappa - I) beta` with `kappa = (Sigma_X + sigma2_nu I)^-1 Sigma_X`.
pub fn theoretical_attenuation_bias(config: &SimConfig) -> Result<f64> {
    config.validate()?;
    let q = config.covariates();
    let sigma_x = config.covariate_covariance();
    let observed = &sigma_x + DMatrix::identity(q, q) * config.noise_variance();
    let kappa = observed
        .cholesky()
        .ok_or_else(|| Error::Numerical("observed covariate covariance is not positive definite".into()))?
        .solve(&sigma_x);
    let shrink = kappa - DMatrix::identity(q, q);
    let beta = nalgebra::DVector::from_column_slice(&config.beta);
    let target = nalgebra::DVector::from_column_slice(&config.target);
    Ok(target.dot(&(shrink * beta)))
}
