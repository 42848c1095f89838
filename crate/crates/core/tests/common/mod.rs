#![allow(dead_code)]

use hsbw::qp::BalanceProblem;
use nalgebra::{DMatrix, DVector};

/// Brute-force simplex search.
///
/// All but the last two weights are enumerated on a grid of step `step`; the
/// remaining pair is minimized exactly along its one-dimensional feasible
/// segment. The best grid point is then refined with successively finer
/// grids in a window around it. Returns `None` when no grid point is feasible.
pub fn grid_oracle(problem: &BalanceProblem, step: f64) -> Option<(Vec<f64>, f64)> {
    let n = problem.units();
    let dense = problem.omega().to_dense().unwrap();
    if n == 1 {
        let gamma = vec![1.0];
        return line_min(problem, &dense, &[]).map(|_| (gamma.clone(), problem.objective(&gamma)));
    }
    let outer = n - 2;
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    let consider = |point: &[f64], best: &mut Option<(Vec<f64>, Vec<f64>, f64)>| {
        if let Some((gamma, obj)) = line_min(problem, &dense, point) {
            if best.as_ref().map_or(true, |b| obj < b.2) {
                *best = Some((point.to_vec(), gamma, obj));
            }
        }
    };

    let steps = (1.0 / step).round() as usize;
    let mut point = vec![0.0; outer];
    enumerate(&mut point, 0, steps, step, 0.0, 1.0, &mut |p| consider(p, &mut best));

    let mut h = step;
    for _ in 0..4 {
        let Some((center, _, _)) = best.clone() else { break };
        let fine = h / 10.0;
        let reach = 30usize;
        let side = 2 * reach + 1;
        for code in 0..side.pow(outer as u32) {
            let mut rest = code;
            let p: Vec<f64> = center
                .iter()
                .map(|c| {
                    let offset = (rest % side) as f64 - reach as f64;
                    rest /= side;
                    c + offset * fine
                })
                .collect();
            if p.iter().all(|x| *x >= 0.0) && p.iter().sum::<f64>() <= 1.0 {
                consider(&p, &mut best);
            }
        }
        h = fine;
    }
    best.map(|(_, gamma, obj)| (gamma, obj))
}

fn enumerate(
    point: &mut Vec<f64>,
    depth: usize,
    steps: usize,
    step: f64,
    used: f64,
    budget: f64,
    visit: &mut dyn FnMut(&[f64]),
) {
    if depth == point.len() {
        visit(point);
        return;
    }
    for k in 0..=steps {
        let value = k as f64 * step;
        if used + value > budget + 1e-12 {
            break;
        }
        point[depth] = value;
        enumerate(point, depth + 1, steps, step, used + value, budget, visit);
    }
}

/// Exact minimization over the last two weights given the leading ones.
fn line_min(problem: &BalanceProblem, dense: &DMatrix<f64>, lead: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = problem.units();
    let rest = 1.0 - lead.iter().sum::<f64>();
    if rest < -1e-15 {
        return None;
    }
    let rest = rest.max(0.0);
    let mut base = lead.to_vec();
    if n == 1 {
        base = vec![1.0];
        for (imb, d) in problem.imbalance(&base).iter().zip(problem.tolerance()) {
            if imb.abs() > d + 1e-12 {
                return None;
            }
        }
        return Some((base.clone(), problem.objective(&base)));
    }
    base.push(0.0);
    base.push(rest);
    let mut dir = vec![0.0; n];
    dir[n - 2] = 1.0;
    dir[n - 1] = -1.0;

    let (mut lo, mut hi) = (0.0f64, rest);
    let at_base = problem.imbalance(&base);
    for j in 0..problem.covariates() {
        let delta = problem.tolerance()[j];
        if !delta.is_finite() {
            continue;
        }
        let slope = problem.z()[(n - 2, j)] - problem.z()[(n - 1, j)];
        let c = at_base[j];
        let slack = 1e-12 * (1.0 + c.abs());
        if slope.abs() < 1e-15 {
            if c.abs() > delta + slack {
                return None;
            }
            continue;
        }
        let a = (-delta - slack - c) / slope;
        let b = (delta + slack - c) / slope;
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    if lo > hi {
        return None;
    }
    let d = DVector::from_column_slice(&dir);
    let g = DVector::from_column_slice(&base);
    let quad = d.dot(&(dense * &d));
    let lin = 2.0 * d.dot(&(dense * &g));
    let t = (-lin / (2.0 * quad)).clamp(lo, hi);
    let gamma: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + t * d).collect();
    let obj = problem.objective(&gamma);
    Some((gamma, obj))
}

/// Exact optimum by enumerating supports and active balance rows; only for
/// small `n` and `q`. Returns `None` when the constraint set is empty.
pub fn enumeration_oracle(problem: &BalanceProblem) -> Option<(Vec<f64>, f64)> {
    let n = problem.units();
    let q = problem.covariates();
    let dense = problem.omega().to_dense().unwrap();
    let finite: Vec<usize> = (0..q).filter(|&j| problem.tolerance()[j].is_finite()).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let patterns = 3usize.pow(finite.len() as u32);
        for pattern in 0..patterns {
            let mut code = pattern;
            let mut eqs: Vec<(usize, f64)> = Vec::new();
            for &j in &finite {
                let s = code % 3;
                code /= 3;
                let delta = problem.tolerance()[j];
                match s {
                    1 => eqs.push((j, problem.target()[j] - delta)),
                    2 if delta > 0.0 => eqs.push((j, problem.target()[j] + delta)),
                    2 => continue,
                    _ => {}
                }
            }
            let Some(gamma) = equality_qp(problem, &dense, &support, &eqs) else { continue };
            if gamma.iter().any(|g| *g < -1e-12) {
                continue;
            }
            let ok = problem
                .imbalance(&gamma)
                .iter()
                .zip(problem.tolerance())
                .all(|(imb, d)| imb.abs() <= d + 1e-10);
            if !ok {
                continue;
            }
            let obj = problem.objective(&gamma);
            if best.as_ref().map_or(true, |b| obj < b.1) {
                best = Some((gamma, obj));
            }
        }
    }
    best
}

fn equality_qp(
    problem: &BalanceProblem,
    dense: &DMatrix<f64>,
    support: &[usize],
    eqs: &[(usize, f64)],
) -> Option<Vec<f64>> {
    let s = support.len();
    let k = 1 + eqs.len();
    let size = s + k;
    let mut kkt = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = 2.0 * dense[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
        for (e, (col, _)) in eqs.iter().enumerate() {
            let z = problem.z()[(i, *col)];
            kkt[(a, s + 1 + e)] = z;
            kkt[(s + 1 + e, a)] = z;
        }
    }
    rhs[s] = 1.0;
    for (e, (_, value)) in eqs.iter().enumerate() {
        rhs[s + 1 + e] = *value;
    }
    let sol = kkt.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
    if (&kkt * &sol - &rhs).amax() > 1e-9 {
        return None;
    }
    let mut gamma = vec![0.0; problem.units()];
    for (a, &i) in support.iter().enumerate() {
        gamma[i] = sol[a];
    }
    Some(gamma)
}

/// GLS fit of `y` on `[1, Z]` with covariance `omega`; the prediction at `v`
/// is linear in `y`, so its coefficients are recovered by feeding unit vectors.
pub fn gls_prediction_weights(z: &DMatrix<f64>, v: &[f64], omega: &DMatrix<f64>) -> Vec<f64> {
    let (n, q) = z.shape();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] });
    let omega_inv = omega.clone().try_inverse().unwrap();
    let normal = design.transpose() * &omega_inv * &design;
    let normal_inv = normal.try_inverse().unwrap();
    let point = DVector::from_iterator(q + 1, std::iter::once(1.0).chain(v.iter().copied()));
    (0..n)
        .map(|i| {
            let mut y = DVector::zeros(n);
            y[i] = 1.0;
            let beta = &normal_inv * design.transpose() * &omega_inv * y;
            point.dot(&beta)
        })
        .collect()
}

/// Sample variance with divisor `len - 1`.
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Panel with `treated_states` treated and `control_states` control states,
/// 2 to 6 regions each; controls sit `shift` higher on every covariate.
pub fn clustered_panel(seed: u64, q: usize, treated_states: usize, control_states: usize, shift: f64) -> hsbw::RegionPanel {
    use rand::{RngExt, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = |r: &mut rand_chacha::ChaCha8Rng| -> f64 { r.sample(rand_distr::StandardNormal) };
    let mut states = Vec::new();
    let mut treated = Vec::new();
    let mut rows = Vec::new();
    for s in 0..treated_states + control_states {
        let is_treated = s < treated_states;
        let effect: Vec<f64> = (0..q).map(|_| 0.5 * normal(&mut r)).collect();
        for _ in 0..r.random_range(2..=6) {
            states.push(format!("s{s}"));
            treated.push(is_treated);
            for e in &effect {
                let base = if is_treated { 0.0 } else { shift };
                rows.push(base + e + normal(&mut r));
            }
        }
    }
    let n = states.len();
    let outcome = (0..n).map(|i| rows[i * q] + normal(&mut r)).collect();
    hsbw::RegionPanel::new(
        (0..q).map(|j| format!("x{j}")).collect(),
        states,
        (0..n).map(|i| format!("r{i}")).collect(),
        treated,
        outcome,
        DMatrix::from_row_slice(n, q, &rows),
        None,
    )
    .unwrap()
}
