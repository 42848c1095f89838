use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// State-clustered (CR0) variance of the control-side regression prediction
/// `alpha_hat + W0_bar^T beta_hat`, from least squares of control outcomes on
/// an intercept and the control covariates. Collinear columns are dropped.
pub fn control_mean_variance(panel: &RegionPanel) -> Result<f64> {
    let control = panel.control_indices();
    let states: BTreeMap<&str, Vec<usize>> = control.iter().enumerate().fold(BTreeMap::new(), |mut acc, (pos, &i)| {
        acc.entry(panel.state_ids()[i].as_str()).or_insert_with(Vec::new).push(pos);
        acc
    });
    if states.len() < 2 {
        return Err(Error::Domain(format!(
            "cluster-robust variance needs control regions in at least 2 states, found {}",
            states.len()
        )));
    }
    let w = panel.rows(&control);
    let n = control.len();
    let kept = independent_columns(&w, panel.covariate_names());
    let design = DMatrix::from_fn(n, kept.len() + 1, |i, j| if j == 0 { 1.0 } else { w[(i, kept[j - 1])] });
    let y = DVector::from_iterator(n, control.iter().map(|&i| panel.outcome()[i]));

    let gram = design.transpose() * &design;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("control design Gram matrix is not positive definite".into()))?;
    let beta = chol.solve(&(design.transpose() * &y));
    let resid = &y - &design * &beta;

    let p = design.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for rows in states.values() {
        let mut score = DVector::zeros(p);
        for &i in rows {
            score += design.row(i).transpose() * resid[i];
        }
        meat += &score * score.transpose();
    }
    let point = DVector::from_iterator(p, (0..p).map(|j| design.column(j).mean()));
    let bread_point = chol.solve(&point);
    Ok(bread_point.dot(&(&meat * &bread_point)).max(0.0))
}

/// Indices of covariate columns that are not collinear with the intercept and
/// earlier kept columns.
fn independent_columns(w: &DMatrix<f64>, names: &[String]) -> Vec<usize> {
    let n = w.nrows();
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0 / (n as f64).sqrt())];
    let mut kept = Vec::new();
    for j in 0..w.ncols() {
        let col = w.column(j).into_owned();
        let centered_norm = (&col - DVector::from_element(n, col.mean())).norm();
        let mut r = col;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r -= b * c;
            }
        }
        let norm = r.norm();
        if centered_norm == 0.0 || norm <= 1e-8 * centered_norm {
            log::warn!("control regression: dropping collinear column {}", names[j]);
            continue;
        }
        basis.push(r / norm);
        kept.push(j);
    }
    kept
}
