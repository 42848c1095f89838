use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance classes, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    PreTreatmentOutcome,
    Unemployment,
    PopulationRatio,
    Demographic,
    CompositionShare,
    Governance,
}

impl Tier {
    pub fn delta(&self) -> f64 {
        match self {
            Tier::PreTreatmentOutcome => 0.05,
            Tier::Unemployment => 0.15,
            Tier::PopulationRatio => 0.5,
            Tier::Demographic => 1.0,
            Tier::CompositionShare => 2.0,
            Tier::Governance => 25.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Tier::PreTreatmentOutcome => "pre_treatment_outcome",
            Tier::Unemployment => "unemployment",
            Tier::PopulationRatio => "population_ratio",
            Tier::Demographic => "demographic",
            Tier::CompositionShare => "composition_share",
            Tier::Governance => "governance",
        }
    }

    pub const ALL: [Tier; 6] = [
        Tier::PreTreatmentOutcome,
        Tier::Unemployment,
        Tier::PopulationRatio,
        Tier::Demographic,
        Tier::CompositionShare,
        Tier::Governance,
    ];
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown tolerance tier '{s}'")))
    }
}

/// Per-covariate tolerances. Covariates without an explicit entry fall back to
/// `default` when one is set; otherwise resolving them is an error.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToleranceSpec {
    entries: BTreeMap<String, f64>,
    default: Option<f64>,
}

impl ToleranceSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same tolerance for every covariate.
    pub fn uniform(delta: f64) -> Self {
        Self {
            entries: BTreeMap::new(),
            default: Some(delta),
        }
    }

    pub fn with_default(mut self, delta: f64) -> Self {
        self.default = Some(delta);
        self
    }

    pub fn set(&mut self, covariate: impl Into<String>, delta: f64) -> Result<()> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::Domain(format!("tolerance must be nonnegative, got {delta}")));
        }
        self.entries.insert(covariate.into(), delta);
        Ok(())
    }

    pub fn set_tier(&mut self, covariate: impl Into<String>, tier: Tier) {
        self.entries.insert(covariate.into(), tier.delta());
    }

    pub fn get(&self, covariate: &str) -> Option<f64> {
        self.entries.get(covariate).copied().or(self.default)
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    /// Tolerances in the order of `names`.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<f64>> {
        let missing: Vec<&str> = names
            .iter()
            .filter(|n| self.get(n).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!("no tolerance for covariates: {}", missing.join(", "))));
        }
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !names.contains(k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Schema(format!("tolerances given for unknown covariates: {}", unknown.join(", "))));
        }
        Ok(names.iter().map(|n| self.get(n).unwrap()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiers_and_defaults() {
        let mut spec = ToleranceSpec::new();
        spec.set_tier("gov", Tier::Governance);
        spec.set("uninsured_2013", 0.05).unwrap();
        let names = vec!["uninsured_2013".to_string(), "gov".to_string()];
        assert_eq!(spec.resolve(&names).unwrap(), vec![0.05, 25.0]);
        let more = vec!["uninsured_2013".to_string(), "gov".to_string(), "female".to_string()];
        assert!(matches!(spec.resolve(&more), Err(Error::Schema(_))));
        assert_eq!(spec.with_default(1.0).resolve(&more).unwrap()[2], 1.0);
        assert_eq!("unemployment".parse::<Tier>().unwrap().delta(), 0.15);
        assert!(ToleranceSpec::new().set("x", -1.0).is_err());
    }
}
