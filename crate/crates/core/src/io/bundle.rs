use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{create, open, write_error};
use crate::calibration::{CalibratedCovariates, NoiseCovarianceSet};
use crate::error::{Error, Result};

/// Noise covariance of one treated region, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionNoise {
    pub state_id: String,
    pub region_id: String,
    pub noise: Vec<f64>,
}

/// Calibration inputs and fitted pieces. Matrices are `q x q`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceBundle {
    pub q: usize,
    pub columns: Vec<String>,
    pub kind: Option<String>,
    pub replicate_count: usize,
    pub scale_factor: f64,
    pub pooled_noise: Vec<f64>,
    pub signal_covariance: Option<Vec<f64>>,
    pub between_covariance: Option<Vec<f64>>,
    pub treated_mean: Option<Vec<f64>>,
    pub ridge: Option<f64>,
    pub clipped_eigenvalues: Vec<f64>,
    pub regions: Vec<RegionNoise>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn from_row_major(q: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != q * q {
        return Err(Error::Schema(format!("{what} has {} entries, expected {}", v.len(), q * q)));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Schema(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_row_slice(q, q, v))
}

impl CovarianceBundle {
    pub fn new(columns: Vec<String>, noise: &NoiseCovarianceSet, calibrated: Option<&CalibratedCovariates>) -> Self {
        Self {
            q: columns.len(),
            columns,
            kind: calibrated.map(|c| c.kind().as_str().to_string()),
            replicate_count: noise.replicate_count,
            scale_factor: noise.scale_factor,
            pooled_noise: row_major(&noise.pooled),
            signal_covariance: calibrated.map(|c| row_major(&c.signal_cov)),
            between_covariance: calibrated.and_then(|c| c.between_cov.as_ref().map(row_major)),
            treated_mean: calibrated.map(|c| c.treated_mean.clone()),
            ridge: calibrated.and_then(|c| c.ridge),
            clipped_eigenvalues: calibrated.map(|c| c.clipped.clone()).unwrap_or_default(),
            regions: noise
                .keys
                .iter()
                .zip(&noise.raw_per_unit)
                .map(|((s, r), m)| RegionNoise {
                    state_id: s.clone(),
                    region_id: r.clone(),
                    noise: row_major(m),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.columns.len() != self.q {
            return Err(Error::Schema(format!(
                "bundle declares q = {} with {} column names",
                self.q,
                self.columns.len()
            )));
        }
        if self.regions.is_empty() {
            return Err(Error::Schema("bundle has no regions".into()));
        }
        from_row_major(self.q, &self.pooled_noise, "pooled_noise")?;
        for (name, m) in [
            ("signal_covariance", &self.signal_covariance),
            ("between_covariance", &self.between_covariance),
        ] {
            if let Some(m) = m {
                from_row_major(self.q, m, name)?;
            }
        }
        if let Some(mean) = &self.treated_mean {
            if mean.len() != self.q {
                return Err(Error::Schema("treated_mean length differs from q".into()));
            }
        }
        if !self.scale_factor.is_finite() {
            return Err(Error::Schema("scale_factor is not finite".into()));
        }
        Ok(())
    }

    /// Per-region noise covariances for recalibration.
    pub fn noise_set(&self) -> Result<NoiseCovarianceSet> {
        self.validate()?;
        let keys = self
            .regions
            .iter()
            .map(|r| (r.state_id.clone(), r.region_id.clone()))
            .collect();
        let raw = self
            .regions
            .iter()
            .map(|r| from_row_major(self.q, &r.noise, &format!("noise of ({}, {})", r.state_id, r.region_id)))
            .collect::<Result<Vec<_>>>()?;
        NoiseCovarianceSet::from_raw(keys, raw, self.replicate_count, self.scale_factor)
    }
}

pub fn parse_covariance_bundle(text: &str) -> Result<CovarianceBundle> {
    let bundle: CovarianceBundle = serde_json::from_str(text).map_err(|e| Error::Parse {
        row: e.line(),
        column: format!("char {}", e.column()),
        message: e.to_string(),
    })?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_covariance_bundle(path: impl AsRef<Path>) -> Result<CovarianceBundle> {
    let path = path.as_ref();
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    parse_covariance_bundle(&text)
}

pub fn write_covariance_bundle(bundle: &CovarianceBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, bundle).map_err(|e| write_error(path, e))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_json() {
        let noise = NoiseCovarianceSet::from_raw(
            vec![("a".into(), "1".into()), ("b".into(), "2".into())],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 2.0]),
                DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.3]),
            ],
            80,
            4.0,
        )
        .unwrap();
        let bundle = CovarianceBundle::new(vec!["x".into(), "y".into()], &noise, None);
        let text = serde_json::to_string(&bundle).unwrap();
        let back = parse_covariance_bundle(&text).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.noise_set().unwrap(), noise);
        let mut bad = bundle.clone();
        bad.regions[0].noise.pop();
        assert!(bad.noise_set().is_err());
    }
}
