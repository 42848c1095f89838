use super::problem::BalanceProblem;

/// A finite-tolerance balance row in centered form:
/// `lo <= (Z_j - v_j 1)^T gamma <= hi`, which equals `|Z_j^T gamma - v_j| <= delta_j`
/// whenever `sum gamma = 1`.
#[derive(Debug, Clone)]
pub(crate) struct BalanceRow {
    pub column: usize,
    pub coef: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    /// Root mean square of `coef`; zero means the row is vacuous.
    pub scale: f64,
}

impl BalanceRow {
    pub fn is_equality(&self) -> bool {
        self.lo == self.hi
    }

    pub fn value(&self, gamma: &[f64]) -> f64 {
        self.coef.iter().zip(gamma).map(|(c, g)| c * g).sum()
    }
}

pub(crate) fn balance_rows(problem: &BalanceProblem) -> Vec<BalanceRow> {
    let n = problem.units();
    (0..problem.covariates())
        .filter(|&j| problem.tolerance()[j].is_finite())
        .map(|j| {
            let v = problem.target()[j];
            let coef: Vec<f64> = problem.z().column(j).iter().map(|z| z - v).collect();
            let scale = (coef.iter().map(|c| c * c).sum::<f64>() / n as f64).sqrt();
            let delta = problem.tolerance()[j];
            BalanceRow {
                column: j,
                coef,
                lo: -delta,
                hi: delta,
                scale,
            }
        })
        .collect()
}
