use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};

use super::config::{SimConfig, SizeModel};
use crate::calibration::{AdjustmentKind, NoiseCovarianceSet};
use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// Deterministic generator for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    /// Covariates of the state's regions, one row each.
    pub covariates: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub states: Vec<PopulationState>,
}

impl Population {
    pub fn region_count(&self) -> usize {
        self.states.iter().map(|s| s.covariates.nrows()).sum()
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, q: usize) -> DVector<f64> {
    DVector::from_iterator(q, (0..q).map(|_| StandardNormal.sample(rng)))
}

fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(m.clone());
    }
    Ok(m.clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("covariate covariance is not positive definite".into()))?
        .l())
}

/// States with `floor(Exp(rate) + min_regions)` regions, state means drawn
/// from the between-state covariance and regions around them from the
/// within-state covariance.
pub fn draw_population(config: &SimConfig, seed: u64) -> Result<Population> {
    config.validate()?;
    let q = config.covariates();
    let between = cholesky_factor(&config.between_covariance())?;
    let within = cholesky_factor(&config.within_covariance())?;
    let exp = Exp::new(config.exp_rate).map_err(|e| Error::Domain(format!("region count distribution: {e}")))?;
    let mut rng = stream_rng(seed, 0);
    let states = (0..config.population_states)
        .map(|_| {
            let size = (exp.sample(&mut rng) + config.min_regions as f64).floor() as usize;
            let mean = &between * normal_vector(&mut rng, q);
            let mut covariates = DMatrix::zeros(size, q);
            for c in 0..size {
                let x = &mean + &within * normal_vector(&mut rng, q);
                covariates.set_row(c, &x.transpose());
            }
            PopulationState { covariates }
        })
        .collect();
    Ok(Population { states })
}

/// One observed sample of treated states.
#[derive(Debug, Clone)]
pub struct SimDraw {
    /// Population index of each sampled state, in sampling order.
    pub sampled: Vec<usize>,
    pub state_labels: Vec<String>,
    pub region_labels: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub w: DMatrix<f64>,
    pub j: Vec<f64>,
    pub sample_sizes: Vec<f64>,
    /// True noise variance of each region.
    pub noise_variance: Vec<f64>,
    /// Estimated noise covariance of each region's covariates.
    pub noise_estimates: Vec<DMatrix<f64>>,
}

/// Covariates handed to the weighting step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum InputSet {
    #[serde(rename = "W")]
    Observed,
    #[serde(rename = "X")]
    True,
    #[serde(rename = "Xhat-hom")]
    Homogeneous,
    #[serde(rename = "Xhat-het")]
    Heterogeneous,
    #[serde(rename = "Xhat-cor")]
    Correlated,
}

impl InputSet {
    pub const ALL: [InputSet; 5] = [
        InputSet::Observed,
        InputSet::True,
        InputSet::Homogeneous,
        InputSet::Heterogeneous,
        InputSet::Correlated,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            InputSet::Observed => "W",
            InputSet::True => "X",
            InputSet::Homogeneous => "Xhat-hom",
            InputSet::Heterogeneous => "Xhat-het",
            InputSet::Correlated => "Xhat-cor",
        }
    }

    pub fn adjustment(&self) -> Option<AdjustmentKind> {
        match self {
            InputSet::Observed | InputSet::True => None,
            InputSet::Homogeneous => Some(AdjustmentKind::Homogeneous),
            InputSet::Heterogeneous => Some(AdjustmentKind::Heterogeneous),
            InputSet::Correlated => Some(AdjustmentKind::Correlated),
        }
    }
}

impl std::str::FromStr for InputSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputSet::ALL
            .iter()
            .copied()
            .find(|i| i.label() == s)
            .ok_or_else(|| Error::Schema(format!("unknown input set '{s}'")))
    }
}

/// Sample states without replacement, then draw outcomes with equicorrelated
/// state errors and noisy measurements of outcomes and covariates.
pub fn draw_sample_and_observe(population: &Population, config: &SimConfig, seed: u64, stream: u64) -> Result<SimDraw> {
    config.validate()?;
    if config.sampled_states > population.states.len() {
        return Err(Error::Domain(format!(
            "cannot sample {} of {} states",
            config.sampled_states,
            population.states.len()
        )));
    }
    let q = config.covariates();
    let mut rng = stream_rng(seed, stream);
    let sampled = index::sample(&mut rng, population.states.len(), config.sampled_states).into_vec();
    let n: usize = sampled.iter().map(|&s| population.states[s].covariates.nrows()).sum();

    let state_sd = config.state_error_variance().sqrt();
    let region_sd = config.region_error_variance().max(0.0).sqrt();
    let noise_free = config.tau >= 1.0;
    let common = config.common_noise_variance();
    let perturb = if noise_free || config.noise_estimate_variance == 0.0 {
        None
    } else {
        let shape = config.noise_variance().powi(2) / config.noise_estimate_variance;
        Some(Gamma::new(shape, 1.0 / shape).map_err(|e| Error::Domain(format!("noise estimate distribution: {e}")))?)
    };

    let mut draw = SimDraw {
        sampled: sampled.clone(),
        state_labels: Vec::with_capacity(n),
        region_labels: Vec::with_capacity(n),
        x: DMatrix::zeros(n, q),
        y: Vec::with_capacity(n),
        w: DMatrix::zeros(n, q),
        j: Vec::with_capacity(n),
        sample_sizes: Vec::with_capacity(n),
        noise_variance: Vec::with_capacity(n),
        noise_estimates: Vec::with_capacity(n),
    };
    let mut row = 0;
    for (k, &s) in sampled.iter().enumerate() {
        let xs = &population.states[s].covariates;
        let state_effect: f64 = state_sd * rng.sample::<f64, _>(StandardNormal);
        for c in 0..xs.nrows() {
            let (size, var) = match config.size_model {
                SizeModel::Constant => (1.0, config.noise_variance()),
                SizeModel::Uniform { low, high } => {
                    let r = rng.random_range(low..high);
                    (r, common / r)
                }
            };
            let sd = if noise_free { 0.0 } else { var.sqrt() };
            let mut mean = config.alpha;
            for jdx in 0..q {
                let x = xs[(c, jdx)];
                draw.x[(row, jdx)] = x;
                mean += config.beta[jdx] * x;
            }
            let region_effect: f64 = region_sd * rng.sample::<f64, _>(StandardNormal);
            let y = mean + state_effect + region_effect;
            let outcome_noise: f64 = rng.sample(StandardNormal);
            draw.y.push(y);
            draw.j.push(y + sd * outcome_noise);
            for jdx in 0..q {
                let e: f64 = rng.sample(StandardNormal);
                draw.w[(row, jdx)] = draw.x[(row, jdx)] + sd * e;
            }
            let estimate = match &perturb {
                None => DMatrix::zeros(q, q),
                Some(g) => DMatrix::from_diagonal(&DVector::from_iterator(
                    q,
                    (0..q).map(|_| var * g.sample(&mut rng)),
                )),
            };
            draw.noise_estimates.push(estimate);
            draw.noise_variance.push(if noise_free { 0.0 } else { var });
            draw.sample_sizes.push(size);
            draw.state_labels.push(format!("s{s:05}"));
            draw.region_labels.push(format!("r{k:02}-{c:03}"));
            row += 1;
        }
    }
    Ok(draw)
}

impl SimDraw {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// All-treated panel over the chosen covariates, with the noisy outcome.
    pub fn panel(&self, input: InputSet) -> Result<RegionPanel> {
        let q = self.x.ncols();
        let covariates = match input {
            InputSet::True => self.x.clone(),
            _ => self.w.clone(),
        };
        let sizes = DMatrix::from_fn(self.len(), q, |i, _| self.sample_sizes[i]);
        RegionPanel::new(
            (1..=q).map(|j| format!("x{j}")).collect(),
            self.state_labels.clone(),
            self.region_labels.clone(),
            vec![true; self.len()],
            self.j.clone(),
            covariates,
            Some(sizes),
        )
    }

    pub fn noise_set(&self) -> Result<NoiseCovarianceSet> {
        let keys = self
            .state_labels
            .iter()
            .cloned()
            .zip(self.region_labels.iter().cloned())
            .collect();
        NoiseCovarianceSet::from_raw(keys, self.noise_estimates.clone(), 0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            population_states: 200,
            sampled_states: 10,
            ..SimConfig::default()
        }
    }

    #[test]
    fn noise_free_observes_truth() {
        let c = SimConfig { tau: 1.0, ..small() };
        let pop = draw_population(&c, 1).unwrap();
        let d = draw_sample_and_observe(&pop, &c, 1, 3).unwrap();
        assert_eq!(d.w, d.x);
        assert_eq!(d.j, d.y);
        assert!(d.noise_estimates.iter().all(|m| m.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn same_seed_same_draw() {
        let c = small();
        let pop = draw_population(&c, 9).unwrap();
        let a = draw_sample_and_observe(&pop, &c, 9, 4).unwrap();
        let b = draw_sample_and_observe(&pop, &c, 9, 4).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.j, b.j);
        let other = draw_sample_and_observe(&pop, &c, 9, 5).unwrap();
        assert_ne!(a.j, other.j);
    }

    #[test]
    fn zero_between_variance_without_rho_x() {
        let c = small();
        assert!(c.between_covariance().iter().all(|v| *v == 0.0));
        let pop = draw_population(&c, 2).unwrap();
        assert!(pop.states.iter().all(|s| s.covariates.nrows() >= 10));
    }

    #[test]
    fn panel_has_sizes_and_labels() {
        let c = small();
        let pop = draw_population(&c, 5).unwrap();
        let d = draw_sample_and_observe(&pop, &c, 5, 0).unwrap();
        let p = d.panel(InputSet::Observed).unwrap();
        assert_eq!(p.treated_states().len(), 10);
        assert!(p.sample_sizes().unwrap().iter().all(|r| (300.0..2300.0).contains(r)));
        assert_eq!(d.noise_set().unwrap().keys.len(), d.len());
        assert_eq!("Xhat-cor".parse::<InputSet>().unwrap(), InputSet::Correlated);
    }
}
