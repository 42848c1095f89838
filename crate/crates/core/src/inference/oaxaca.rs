use serde::{Deserialize, Serialize};

use crate::balancing::{treated_matrix, CovariateSource};
use crate::error::Result;
use crate::panel::RegionPanel;
use crate::qp::{least_norm_gls_weights_named, BlockCorrelationMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMode {
    Ols,
    Gls,
}

/// Treated weights whose weighted outcome equals the regression prediction at
/// the control covariate mean. Weights may be negative.
pub fn oaxaca_blinder_weights(
    panel: &RegionPanel,
    source: CovariateSource,
    mode: RegressionMode,
    rho: f64,
) -> Result<Vec<f64>> {
    panel.require_groups(1, 1)?;
    let z = treated_matrix(panel, source)?;
    let rho = match mode {
        RegressionMode::Ols => 0.0,
        RegressionMode::Gls => rho,
    };
    let omega = BlockCorrelationMatrix::new(&panel.treated_state_labels(), rho)?;
    least_norm_gls_weights_named(&z, &panel.control_mean(), &omega, panel.covariate_names())
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;

    #[test]
    fn prediction_at_treated_mean_is_uniform() {
        // Control row equals the treated mean.
        let panel = RegionPanel::new(
            vec!["x".into(), "y".into()],
            ["a", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
            (0..5).map(|i| i.to_string()).collect(),
            vec![true, true, true, true, false],
            vec![0.0; 5],
            DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 2.0, 0.0, 1.0, 4.0, 5.0, 3.0, 2.0, 2.0]),
            None,
        )
        .unwrap();
        let w = oaxaca_blinder_weights(&panel, CovariateSource::Raw, RegressionMode::Ols, 0.0).unwrap();
        for x in &w {
            assert!((x - 0.25).abs() < 1e-12);
        }
        let g = oaxaca_blinder_weights(&panel, CovariateSource::Raw, RegressionMode::Gls, 0.0).unwrap();
        assert_eq!(w, g);
    }
}
