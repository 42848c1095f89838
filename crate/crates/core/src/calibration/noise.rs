use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::panel::RegionPanel;

/// Scale factor for successive-difference replicate weights.
pub const REPLICATE_SCALE: f64 = 4.0;

/// Replicate estimates of the covariates, one matrix per replicate with rows
/// aligned to `keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    covariate_names: Vec<String>,
    keys: Vec<(String, String)>,
    replicates: Vec<DMatrix<f64>>,
}

impl ReplicateSet {
    pub fn new(
        covariate_names: Vec<String>,
        keys: Vec<(String, String)>,
        replicates: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        for (b, rep) in replicates.iter().enumerate() {
            if rep.nrows() != keys.len() || rep.ncols() != covariate_names.len() {
                return Err(Error::Schema(format!(
                    "replicate {} has shape {}x{}, expected {}x{}",
                    b + 1,
                    rep.nrows(),
                    rep.ncols(),
                    keys.len(),
                    covariate_names.len()
                )));
            }
            if rep.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("replicate {} has non-finite values", b + 1)));
            }
        }
        Ok(Self {
            covariate_names,
            keys,
            replicates,
        })
    }

    pub fn count(&self) -> usize {
        self.replicates.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn keys(&self) -> &[(String, String)] {
        &self.keys
    }

    pub fn replicates(&self) -> &[DMatrix<f64>] {
        &self.replicates
    }
}

/// Measurement-error covariances of the treated regions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovarianceSet {
    /// Treated region keys, in panel order.
    pub keys: Vec<(String, String)>,
    pub raw_per_unit: Vec<DMatrix<f64>>,
    /// Mean of the raw matrices.
    pub pooled: DMatrix<f64>,
    /// Size-model covariances, when sample sizes were applied.
    pub per_unit_scaled: Option<Vec<DMatrix<f64>>>,
    pub replicate_count: usize,
    pub scale_factor: f64,
}

impl NoiseCovarianceSet {
    pub fn from_raw(
        keys: Vec<(String, String)>,
        raw_per_unit: Vec<DMatrix<f64>>,
        replicate_count: usize,
        scale_factor: f64,
    ) -> Result<Self> {
        if raw_per_unit.is_empty() || keys.len() != raw_per_unit.len() {
            return Err(Error::Domain("noise covariances need one matrix per treated region".into()));
        }
        let q = raw_per_unit[0].nrows();
        if raw_per_unit.iter().any(|m| m.shape() != (q, q)) {
            return Err(Error::Domain("noise covariances must all be q x q".into()));
        }
        let raw_per_unit: Vec<DMatrix<f64>> = raw_per_unit.iter().map(symmetrize).collect();
        let pooled = mean_matrix(&raw_per_unit);
        Ok(Self {
            keys,
            raw_per_unit,
            pooled,
            per_unit_scaled: None,
            replicate_count,
            scale_factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.pooled.nrows()
    }

    /// Keep the given covariate columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let q = self.dim();
        if let Some(bad) = cols.iter().find(|&&c| c >= q) {
            return Err(Error::Schema(format!("noise covariance has {q} columns, asked for column {bad}")));
        }
        let pick = |m: &DMatrix<f64>| m.select_rows(cols).select_columns(cols);
        let mut out = Self::from_raw(
            self.keys.clone(),
            self.raw_per_unit.iter().map(pick).collect(),
            self.replicate_count,
            self.scale_factor,
        )?;
        out.per_unit_scaled = self.per_unit_scaled.as_ref().map(|v| v.iter().map(pick).collect());
        Ok(out)
    }

    /// Keep the treated regions of `panel`, in its order, and re-pool.
    pub fn restrict_to(&self, panel: &RegionPanel) -> Result<Self> {
        let index: HashMap<(&str, &str), usize> = self
            .keys
            .iter()
            .enumerate()
            .map(|(k, (s, r))| ((s.as_str(), r.as_str()), k))
            .collect();
        let mut keys = Vec::new();
        let mut raw = Vec::new();
        for i in panel.treated_indices() {
            let key = panel.key(i);
            let k = *index.get(&key).ok_or_else(|| {
                Error::Schema(format!("no noise covariance for region ({}, {})", key.0, key.1))
            })?;
            keys.push(self.keys[k].clone());
            raw.push(self.raw_per_unit[k].clone());
        }
        Self::from_raw(keys, raw, self.replicate_count, self.scale_factor)
    }
}

pub(crate) fn mean_matrix(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut total = DMatrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        total += m;
    }
    symmetrize(&(total / ms.len() as f64))
}

/// `(scale / B) sum_b (W_b - W)(W_b - W)^T` for every treated region of the
/// point panel, with replicate rows matched by (state, region) key.
pub fn replicate_noise_covariance(
    replicates: &ReplicateSet,
    point: &RegionPanel,
    scale_factor: f64,
) -> Result<NoiseCovarianceSet> {
    let b = replicates.count();
    if b < 2 {
        return Err(Error::Domain(format!("need at least 2 replicates, found {b}")));
    }
    if replicates.covariate_names() != point.covariate_names() {
        return Err(Error::Schema(format!(
            "replicate columns {:?} differ from panel columns {:?}",
            replicates.covariate_names(),
            point.covariate_names()
        )));
    }
    let index: HashMap<(&str, &str), usize> = replicates
        .keys()
        .iter()
        .enumerate()
        .map(|(k, (s, r))| ((s.as_str(), r.as_str()), k))
        .collect();
    let mut missing: Vec<String> = (0..point.len())
        .map(|i| point.key(i))
        .filter(|key| !index.contains_key(key))
        .map(|(s, r)| format!("({s}, {r})"))
        .collect();
    let panel_keys: std::collections::HashSet<(&str, &str)> = (0..point.len()).map(|i| point.key(i)).collect();
    missing.extend(
        replicates
            .keys()
            .iter()
            .filter(|(s, r)| !panel_keys.contains(&(s.as_str(), r.as_str())))
            .map(|(s, r)| format!("({s}, {r}) not in panel")),
    );
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "replicate keys do not match the panel: {}",
            missing.join(", ")
        )));
    }

    let q = point.covariate_names().len();
    let factor = scale_factor / b as f64;
    let mut keys = Vec::new();
    let mut raw = Vec::new();
    for i in point.treated_indices() {
        let key = point.key(i);
        let row = index[&key];
        let mut acc = DMatrix::zeros(q, q);
        for rep in replicates.replicates() {
            let dev = (rep.row(row) - point.covariates().row(i)).transpose();
            acc += &dev * dev.transpose();
        }
        keys.push((key.0.to_string(), key.1.to_string()));
        raw.push(acc * factor);
    }
    if raw.is_empty() {
        return Err(Error::Domain("panel has no treated regions".into()));
    }
    NoiseCovarianceSet::from_raw(keys, raw, b, scale_factor)
}

/// Size-model noise: pool `S_sc o raw_sc` over treated regions, then divide
/// the pooled matrix elementwise by each region's `S_sc = sqrt(s) sqrt(s)^T`.
/// Returns (pooled, per-region matrices).
pub fn size_scaled_noise(
    raw_per_unit: &[DMatrix<f64>],
    sample_sizes: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    if sample_sizes.nrows() != raw_per_unit.len() {
        return Err(Error::Domain("one sample-size row per treated region required".into()));
    }
    if let Some(bad) = sample_sizes.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("sample sizes must be positive, found {bad}")));
    }
    let outer = |i: usize| {
        let root = sample_sizes.row(i).map(f64::sqrt).transpose();
        &root * root.transpose()
    };
    let scaled: Vec<DMatrix<f64>> = raw_per_unit
        .iter()
        .enumerate()
        .map(|(i, raw)| raw.component_mul(&outer(i)))
        .collect();
    let pooled = mean_matrix(&scaled);
    let per_unit = (0..raw_per_unit.len())
        .map(|i| symmetrize(&pooled.component_div(&outer(i))))
        .collect();
    Ok((pooled, per_unit))
}
