use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Region-level observations: one row per (state, region).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPanel {
    covariate_names: Vec<String>,
    state_ids: Vec<String>,
    region_ids: Vec<String>,
    treated: Vec<bool>,
    outcome: Vec<f64>,
    /// Rows are regions, columns covariates.
    covariates: DMatrix<f64>,
    /// Per-region, per-covariate sample sizes, same shape as `covariates`.
    sample_sizes: Option<DMatrix<f64>>,
}

impl RegionPanel {
    pub fn new(
        covariate_names: Vec<String>,
        state_ids: Vec<String>,
        region_ids: Vec<String>,
        treated: Vec<bool>,
        outcome: Vec<f64>,
        covariates: DMatrix<f64>,
        sample_sizes: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = state_ids.len();
        let q = covariate_names.len();
        if region_ids.len() != n || treated.len() != n || outcome.len() != n || covariates.nrows() != n {
            return Err(Error::Schema("panel columns have different lengths".into()));
        }
        if covariates.ncols() != q {
            return Err(Error::Schema(format!(
                "{} covariate names for {} covariate columns",
                q,
                covariates.ncols()
            )));
        }
        let mut names = HashSet::new();
        for name in &covariate_names {
            if !names.insert(name) {
                return Err(Error::Schema(format!("duplicate covariate column '{name}'")));
            }
        }
        if let Some(sizes) = &sample_sizes {
            if sizes.shape() != covariates.shape() {
                return Err(Error::Schema("sample sizes must cover every covariate of every region".into()));
            }
            if let Some(bad) = sizes.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
                return Err(Error::Domain(format!("sample sizes must be positive, found {bad}")));
            }
        }
        let mut keys = HashSet::new();
        let mut state_treatment: HashMap<&str, bool> = HashMap::new();
        for i in 0..n {
            if !keys.insert((&state_ids[i], &region_ids[i])) {
                return Err(Error::Integrity(format!(
                    "duplicate region '{}' in state '{}'",
                    region_ids[i], state_ids[i]
                )));
            }
            match state_treatment.get(state_ids[i].as_str()) {
                Some(&t) if t != treated[i] => {
                    return Err(Error::Integrity(format!(
                        "state '{}' mixes treated and control regions",
                        state_ids[i]
                    )));
                }
                _ => {
                    state_treatment.insert(&state_ids[i], treated[i]);
                }
            }
            if !outcome[i].is_finite() {
                return Err(Error::Domain(format!("non-finite outcome in row {}", i + 1)));
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite covariate value".into()));
        }
        Ok(Self {
            covariate_names,
            state_ids,
            region_ids,
            treated,
            outcome,
            covariates,
            sample_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.state_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_ids.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn state_ids(&self) -> &[String] {
        &self.state_ids
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn sample_sizes(&self) -> Option<&DMatrix<f64>> {
        self.sample_sizes.as_ref()
    }

    pub fn key(&self, i: usize) -> (&str, &str) {
        (&self.state_ids[i], &self.region_ids[i])
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.treated[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.treated[i]).collect()
    }

    /// Distinct treated state ids, sorted.
    pub fn treated_states(&self) -> Vec<String> {
        self.states_where(true)
    }

    pub fn control_states(&self) -> Vec<String> {
        self.states_where(false)
    }

    fn states_where(&self, treated: bool) -> Vec<String> {
        let mut states: Vec<String> = (0..self.len())
            .filter(|&i| self.treated[i] == treated)
            .map(|i| self.state_ids[i].clone())
            .collect();
        states.sort();
        states.dedup();
        states
    }

    /// Covariate rows of the given regions.
    pub fn rows(&self, indices: &[usize]) -> DMatrix<f64> {
        self.covariates.select_rows(indices)
    }

    pub fn treated_covariates(&self) -> DMatrix<f64> {
        self.rows(&self.treated_indices())
    }

    /// Column means over the given regions.
    pub fn column_means(&self, indices: &[usize]) -> Vec<f64> {
        let m = indices.len() as f64;
        (0..self.covariate_names.len())
            .map(|j| indices.iter().map(|&i| self.covariates[(i, j)]).sum::<f64>() / m)
            .collect()
    }

    pub fn treated_mean(&self) -> Vec<f64> {
        self.column_means(&self.treated_indices())
    }

    pub fn control_mean(&self) -> Vec<f64> {
        self.column_means(&self.control_indices())
    }

    /// State labels of the treated regions, in treated order.
    pub fn treated_state_labels(&self) -> Vec<String> {
        self.treated_indices().iter().map(|&i| self.state_ids[i].clone()).collect()
    }

    /// Treated regions grouped by state: state id -> positions within the
    /// treated ordering.
    pub fn treated_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, i) in self.treated_indices().into_iter().enumerate() {
            groups.entry(self.state_ids[i].clone()).or_default().push(pos);
        }
        groups
    }

    /// Panel restricted to the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pick = |v: &[String]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Self::new(
            self.covariate_names.clone(),
            pick(&self.state_ids),
            pick(&self.region_ids),
            indices.iter().map(|&i| self.treated[i]).collect(),
            indices.iter().map(|&i| self.outcome[i]).collect(),
            self.covariates.select_rows(indices),
            self.sample_sizes.as_ref().map(|s| s.select_rows(indices)),
        )
    }

    pub fn without_state(&self, state: &str) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.state_ids[i] != state).collect();
        self.subset(&keep)
    }

    /// Same regions with a different covariate set (and outcome).
    pub fn with_columns(
        &self,
        covariate_names: Vec<String>,
        covariates: DMatrix<f64>,
        outcome: Vec<f64>,
        sample_sizes: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        Self::new(
            covariate_names,
            self.state_ids.clone(),
            self.region_ids.clone(),
            self.treated.clone(),
            outcome,
            covariates,
            sample_sizes,
        )
    }

    /// Keep only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Self> {
        let cols: Vec<usize> = names
            .iter()
            .map(|name| {
                self.covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Schema(format!("unknown covariate '{name}'")))
            })
            .collect::<Result<_>>()?;
        self.with_columns(
            names.to_vec(),
            self.covariates.select_columns(&cols),
            self.outcome.clone(),
            self.sample_sizes.as_ref().map(|s| s.select_columns(&cols)),
        )
    }

    /// Require at least `treated` treated and `control` control regions.
    pub fn require_groups(&self, treated: usize, control: usize) -> Result<()> {
        let n1 = self.treated.iter().filter(|t| **t).count();
        let n0 = self.len() - n1;
        if n1 < treated || n0 < control {
            return Err(Error::Domain(format!(
                "need at least {treated} treated and {control} control regions, found {n1} and {n0}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn mixed_treatment_is_rejected() {
        let err = RegionPanel::new(
            strings(&["x"]),
            strings(&["a", "a"]),
            strings(&["1", "2"]),
            vec![true, false],
            vec![0.0, 0.0],
            DMatrix::zeros(2, 1),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(m) if m.contains("'a'")));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RegionPanel::new(
            strings(&["x"]),
            strings(&["a", "a"]),
            strings(&["1", "1"]),
            vec![true, true],
            vec![0.0, 0.0],
            DMatrix::zeros(2, 1),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn groups_and_means() {
        let p = RegionPanel::new(
            strings(&["x"]),
            strings(&["b", "a", "b", "c"]),
            strings(&["1", "1", "2", "1"]),
            vec![true, true, true, false],
            vec![1.0, 2.0, 3.0, 4.0],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 10.0]),
            None,
        )
        .unwrap();
        assert_eq!(p.treated_mean(), vec![2.0]);
        assert_eq!(p.control_mean(), vec![10.0]);
        let groups = p.treated_groups();
        assert_eq!(groups["b"], vec![0, 2]);
        assert_eq!(groups["a"], vec![1]);
        assert_eq!(p.without_state("b").unwrap().len(), 2);
    }
}
