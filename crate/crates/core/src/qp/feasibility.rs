//! Minimal-violation solve over the simplex, used to certify that a balance
//! constraint set is empty.

use super::admm::dot;
use super::rows::BalanceRow;

#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub gamma: Vec<f64>,
    pub max_violation: f64,
}

/// Accelerated projected gradient on `sum_j dist(c_j^T gamma, [lo_j, hi_j])^2 / scale_j^2`.
pub(crate) fn minimal_violation(n: usize, rows: &[BalanceRow], max_iterations: usize) -> ViolationReport {
    let rows: Vec<&BalanceRow> = rows.iter().filter(|r| r.scale > 0.0).collect();
    let weights: Vec<f64> = rows.iter().map(|r| 1.0 / (r.scale * r.scale)).collect();
    let lipschitz: f64 = 2.0
        * rows
            .iter()
            .zip(&weights)
            .map(|(r, w)| w * dot(&r.coef, &r.coef))
            .sum::<f64>();
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let distance = |row: &BalanceRow, gamma: &[f64]| {
        let value = row.value(gamma);
        value - value.clamp(row.lo, row.hi)
    };
    let objective = |gamma: &[f64]| -> f64 {
        rows.iter()
            .zip(&weights)
            .map(|(r, w)| w * distance(r, gamma).powi(2))
            .sum()
    };

    let mut gamma = vec![1.0 / n as f64; n];
    let mut momentum = gamma.clone();
    let mut t = 1.0f64;
    let mut best = gamma.clone();
    let mut best_value = objective(&gamma);
    for _ in 0..max_iterations {
        if best_value == 0.0 {
            break;
        }
        let mut grad = vec![0.0; n];
        for (r, w) in rows.iter().zip(&weights) {
            let d = distance(r, &momentum);
            if d != 0.0 {
                for (g, c) in grad.iter_mut().zip(&r.coef) {
                    *g += 2.0 * w * d * c;
                }
            }
        }
        let trial: Vec<f64> = momentum.iter().zip(&grad).map(|(m, g)| m - step * g).collect();
        let next = project_simplex(&trial);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        momentum = next
            .iter()
            .zip(&gamma)
            .map(|(a, b)| a + beta * (a - b))
            .collect();
        gamma = next;
        t = t_next;
        let value = objective(&gamma);
        if value < best_value {
            best_value = value;
            best.clone_from(&gamma);
        }
    }

    let max_violation = rows
        .iter()
        .fold(0.0f64, |acc, r| acc.max(distance(r, &best).abs()));
    ViolationReport {
        gamma: best,
        max_violation,
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.4, 2.0, -1.0, 0.3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x >= 0.0));
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
    }
}
