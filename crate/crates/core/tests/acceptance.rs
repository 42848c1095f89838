mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use hsbw::balancing::{AugmentationSpec, ToleranceSpec};
use hsbw::calibration::{
    calibrate, calibrate_correlated, calibrate_homogeneous, signal_covariance, AdjustmentKind, NoiseCovarianceSet,
};
use hsbw::inference::{estimate_effect, fit_weights, jackknife_from_estimates, EstimatorConfig};
use hsbw::io::{run_command, Command, RunConfig};
use hsbw::qp::{closed_form_dispersion, least_norm_gls_weights, solve_balance_qp, BalanceProblem, BlockCorrelationMatrix};
use hsbw::simulation::{run_cell, theoretical_attenuation_bias, CellRun, InputSet, SimConfig, SizeModel, StudyEstimator};
use hsbw::RegionPanel;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const Z95: f64 = 1.959_963_984_540_054;

/// Writes past the test harness capture so every verdict shows in the log.
fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "criterion {id:>2} {tag} {name}: {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn strings(prefix: &str, ids: impl IntoIterator<Item = usize>) -> Vec<String> {
    ids.into_iter().map(|i| format!("{prefix}{i}")).collect()
}

fn mean(x: &[f64]) -> f64 {
    common::mean(x)
}

fn mc_se(x: &[f64]) -> f64 {
    (common::sample_variance(x) / x.len() as f64).sqrt()
}

fn labels_from_sizes(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g, s)).collect()
}

#[test]
fn c01_closed_form_dispersion() {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let groups = r.random_range(1..=8);
        let sizes: Vec<usize> = (0..groups).map(|_| r.random_range(1..=12)).collect();
        let rho = r.random_range(0.0..0.99);
        let labels = labels_from_sizes(&sizes);
        let n = labels.len();
        let z = DMatrix::from_fn(n, 1, |_, _| normal(&mut r));
        let omega = BlockCorrelationMatrix::new(&labels, rho).unwrap();
        let problem = BalanceProblem::new(z, vec![0.0], vec![f64::INFINITY], omega).unwrap();
        let solved = solve_balance_qp(&problem);

        // Weight in proportion to 1 / ((p - 1) rho + 1), normalized.
        let raw: Vec<f64> = labels.iter().map(|&g| 1.0 / ((sizes[g] as f64 - 1.0) * rho + 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let closed = closed_form_dispersion(&labels, rho).unwrap();
        for ((s, c), w) in solved.gamma.iter().zip(&closed).zip(&raw) {
            worst = worst.max((s - w / total).abs()).max((c - w / total).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "closed-form dispersion weights",
        worst <= 1e-6 && secs < 5.0,
        format!("max |dev| {worst:.2e} (tol 1e-6), {secs:.2}s (limit 5s)"),
    );
}

#[test]
fn c02_grid_search_equivalence() {
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    let mut solved = 0;
    while solved < 100 {
        let n = r.random_range(1..=4);
        let q = r.random_range(1..=2);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let rho = r.random_range(0.0..0.9);
        let z: Vec<f64> = (0..n * q).map(|_| r.random_range(-2.0..2.0)).collect();
        let mix: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
        let m: f64 = mix.iter().sum();
        let v: Vec<f64> = (0..q)
            .map(|j| (0..n).map(|i| mix[i] / m * z[i * q + j]).sum::<f64>() + r.random_range(-0.3..0.3))
            .collect();
        let delta: Vec<f64> = (0..q)
            .map(|_| if r.random_range(0..5) == 0 { f64::INFINITY } else { r.random_range(0.05..0.8) })
            .collect();
        let problem = BalanceProblem::new(
            DMatrix::from_row_slice(n, q, &z),
            v,
            delta,
            BlockCorrelationMatrix::new(&labels, rho).unwrap(),
        )
        .unwrap();
        let Some((_, grid_obj)) = common::grid_oracle(&problem, 1e-3) else { continue };
        let s = solve_balance_qp(&problem);
        worst = worst.max((s.objective - grid_obj).abs());
        solved += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "solver matches simplex grid search",
        worst <= 1e-5 && secs < 120.0,
        format!("max |objective gap| {worst:.2e} (tol 1e-5) over {solved} instances, {secs:.1}s (limit 120s)"),
    );
}

#[test]
fn c03_gls_identity() {
    let start = Instant::now();
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let q = r.random_range(1..=4);
        let groups = r.random_range(2..=6);
        let sizes: Vec<usize> = (0..groups).map(|_| r.random_range(1..=6)).collect();
        let labels = labels_from_sizes(&sizes);
        let n = labels.len();
        if n < q + 2 {
            continue;
        }
        let z = DMatrix::from_fn(n, q, |_, _| normal(&mut r));
        let v: Vec<f64> = (0..q).map(|_| normal(&mut r)).collect();
        let omega = BlockCorrelationMatrix::new(&labels, r.random_range(0.0..0.95)).unwrap();
        let fast = least_norm_gls_weights(&z, &v, &omega).unwrap();
        let oracle = common::gls_prediction_weights(&z, &v, &omega.to_dense().unwrap());
        for (a, b) in fast.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "GLS implied weights identity",
        worst <= 1e-8 && secs < 10.0,
        format!("max |dev| {worst:.2e} (tol 1e-8), {secs:.2}s (limit 10s)"),
    );
}

struct NoisyPanel {
    panel: RegionPanel,
    noise: NoiseCovarianceSet,
}

/// Treated-only panel with clustered covariates and random per-region noise.
fn noisy_panel(r: &mut ChaCha8Rng, q: usize, equal_sizes: bool, noise_scale: f64) -> NoisyPanel {
    let states = r.random_range(4..=9);
    let sizes: Vec<usize> = (0..states).map(|_| r.random_range(2..=6)).collect();
    let labels = labels_from_sizes(&sizes);
    let n = labels.len();
    let state_effect: Vec<Vec<f64>> = (0..states).map(|_| (0..q).map(|_| normal(r)).collect()).collect();
    let w = DMatrix::from_fn(n, q, |i, j| state_effect[labels[i]][j] + 1.5 * normal(r));
    let sample = DMatrix::from_fn(n, q, |_, _| if equal_sizes { 400.0 } else { r.random_range(100.0..2000.0) });
    let raw: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(q, q, |_, _| noise_scale * normal(r));
            &a * a.transpose()
        })
        .collect();
    let states_ids = strings("s", labels.iter().copied());
    let regions = strings("r", 0..n);
    let keys = states_ids.iter().cloned().zip(regions.iter().cloned()).collect();
    let panel = RegionPanel::new(
        strings("x", 0..q),
        states_ids,
        regions,
        vec![true; n],
        vec![0.0; n],
        w,
        Some(sample),
    )
    .unwrap();
    let noise = NoiseCovarianceSet::from_raw(keys, raw, 80, 4.0 / 80.0).unwrap();
    NoisyPanel { panel, noise }
}

#[test]
fn c04_calibration_degeneracies() {
    let mut r = rng(404);
    let kinds = [AdjustmentKind::Homogeneous, AdjustmentKind::Heterogeneous, AdjustmentKind::Correlated];

    let mut identity_exact = true;
    for _ in 0..20 {
        let mut np = noisy_panel(&mut r, 3, false, 0.0);
        np.noise = NoiseCovarianceSet::from_raw(
            np.noise.keys.clone(),
            vec![DMatrix::zeros(3, 3); np.noise.keys.len()],
            80,
            0.05,
        )
        .unwrap();
        for kind in kinds {
            let c = calibrate(&np.panel, &np.noise, kind).unwrap();
            identity_exact &= c.x_hat == np.panel.treated_covariates();
        }
    }

    let mut het_gap = 0.0f64;
    for _ in 0..20 {
        let np = noisy_panel(&mut r, 3, true, 0.3);
        let hom = calibrate(&np.panel, &np.noise, AdjustmentKind::Homogeneous).unwrap();
        let het = calibrate(&np.panel, &np.noise, AdjustmentKind::Heterogeneous).unwrap();
        het_gap = het_gap.max((&hom.x_hat - &het.x_hat).amax());
    }

    let mut cor_gap = 0.0f64;
    for _ in 0..20 {
        let np = noisy_panel(&mut r, 3, false, 0.3);
        let noise = np.noise.restrict_to(&np.panel).unwrap();
        let signal = signal_covariance(&np.panel, &noise.pooled).unwrap();
        let hom = calibrate_homogeneous(&np.panel, &signal.matrix, &noise.pooled).unwrap();
        let cor = calibrate_correlated(&np.panel, &signal.matrix, &noise.pooled, &DMatrix::zeros(3, 3)).unwrap();
        cor_gap = cor_gap.max((&hom.x_hat - &cor.x_hat).amax());
    }

    let mut contracted = 0;
    for _ in 0..100 {
        let q = r.random_range(1..=4);
        let np = noisy_panel(&mut r, q, false, 0.4);
        let hom = calibrate(&np.panel, &np.noise, AdjustmentKind::Homogeneous).unwrap();
        let w = np.panel.treated_covariates();
        let ok = (0..q).all(|j| {
            let before: Vec<f64> = w.column(j).iter().copied().collect();
            let after: Vec<f64> = hom.x_hat.column(j).iter().copied().collect();
            common::sample_variance(&after) <= common::sample_variance(&before) * (1.0 + 1e-12)
        });
        contracted += ok as usize;
    }

    verdict(
        4,
        "calibration degeneracies",
        identity_exact && het_gap <= 1e-12 && cor_gap <= 1e-12 && contracted == 100,
        format!(
            "zero noise exact {identity_exact}, equal sizes gap {het_gap:.1e}, zero between gap {cor_gap:.1e}, \
             contraction {contracted}/100"
        ),
    );
}

fn sim_cell(tau: f64, rho_x: f64, n_sims: usize) -> SimConfig {
    SimConfig {
        tau,
        rho_x,
        n_sims,
        size_model: SizeModel::Constant,
        ..SimConfig::default()
    }
}

fn estimates(run: &CellRun, e: usize) -> Vec<f64> {
    run.outcomes[e].iter().flatten().map(|o| o.estimate).collect()
}

fn noisy_cell() -> &'static CellRun {
    static RUN: OnceLock<CellRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let estimators = [InputSet::Observed, InputSet::True, InputSet::Homogeneous]
            .map(|input| StudyEstimator { input, rho: 0.0 });
        run_cell(&sim_cell(0.9, 0.25, 300), 0, &estimators, false).unwrap()
    })
}

#[test]
fn c05_unadjusted_bias() {
    let start = Instant::now();
    let run = noisy_cell();
    let analytic = theoretical_attenuation_bias(&run.config).unwrap();
    let truth = run.config.true_effect();
    let psi = estimates(run, 0);
    let bias = mean(&psi) - truth;
    let se = mc_se(&psi);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "unadjusted bias matches attenuation formula",
        (bias - analytic).abs() <= 3.0 * se && (analytic + 0.2069).abs() < 5e-4 && psi.len() == 300,
        format!(
            "bias {bias:.4} vs analytic {analytic:.4}, MC SE {se:.4}, {} of 300 usable, {secs:.0}s",
            psi.len()
        ),
    );
}

#[test]
fn c06_adjusted_unbiased() {
    let run = noisy_cell();
    let truth = run.config.true_effect();
    let mut pass = true;
    let mut detail = Vec::new();
    for (e, name) in [(1, "X"), (2, "Xhat-hom")] {
        let psi = estimates(run, e);
        let bias = mean(&psi) - truth;
        let se = mc_se(&psi);
        pass &= bias.abs() <= 3.0 * se && psi.len() == 300;
        detail.push(format!("{name} bias {bias:.4} (3 SE {:.4})", 3.0 * se));
    }
    verdict(6, "adjusted estimators unbiased", pass, detail.join(", "));
}

#[test]
fn c07_variance_ordering() {
    let start = Instant::now();
    let config = SimConfig {
        rho_star: 0.25,
        ..sim_cell(1.0, 0.0, 500)
    };
    let estimators = [0.25, 0.0].map(|rho| StudyEstimator {
        input: InputSet::True,
        rho,
    });
    let run = run_cell(&config, 1, &estimators, false).unwrap();
    let pairs: Vec<(f64, f64)> = run.outcomes[0]
        .iter()
        .zip(&run.outcomes[1])
        .filter_map(|(a, b)| Some((a.as_ref()?.estimate, b.as_ref()?.estimate)))
        .collect();
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (var_a, var_b) = (common::sample_variance(&a), common::sample_variance(&b));

    // Paired comparison of variances: corr(a + b, a - b) has the sign of var_a - var_b.
    let sums: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (ms, md) = (mean(&sums), mean(&diffs));
    let cov: f64 = sums.iter().zip(&diffs).map(|(s, d)| (s - ms) * (d - md)).sum();
    let ss: f64 = sums.iter().map(|s| (s - ms).powi(2)).sum();
    let sd: f64 = diffs.iter().map(|d| (d - md).powi(2)).sum();
    let corr = cov / (ss * sd).sqrt();
    let k = pairs.len() as f64;
    let t = corr * (k - 2.0).sqrt() / (1.0 - corr * corr).sqrt();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "dispersion lowers variance under correlated errors",
        var_a <= var_b && t < -1.645 && pairs.len() == 500,
        format!("var rho=0.25 {var_a:.5} vs rho=0 {var_b:.5}, paired t {t:.2} (< -1.645), {secs:.0}s"),
    );
}

fn coverage_cell() -> &'static CellRun {
    static RUN: OnceLock<CellRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let estimators = [InputSet::Observed, InputSet::Homogeneous].map(|input| StudyEstimator { input, rho: 0.0 });
        run_cell(&sim_cell(0.9, 0.0, 500), 2, &estimators, true).unwrap()
    })
}

fn coverage(run: &CellRun, e: usize) -> (f64, usize) {
    let truth = run.config.true_effect();
    let usable: Vec<(f64, f64)> = run.outcomes[e]
        .iter()
        .flatten()
        .filter_map(|o| Some((o.estimate, o.jackknife_variance?)))
        .collect();
    let hits = usable.iter().filter(|(psi, var)| (psi - truth).abs() <= Z95 * var.sqrt()).count();
    (hits as f64 / usable.len() as f64, usable.len())
}

#[test]
fn c08_jackknife_coverage() {
    let start = Instant::now();
    let run = coverage_cell();
    let (raw, n_raw) = coverage(run, 0);
    let (adj, n_adj) = coverage(run, 1);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "jackknife interval coverage",
        (0.91..=0.98).contains(&adj) && raw < adj && n_adj == 500,
        format!("Xhat-hom {adj:.3} ({n_adj} usable, want [0.91, 0.98]), W {raw:.3} ({n_raw} usable), {secs:.0}s"),
    );
}

/// Panel with treated states drawn away from the controls.
fn shifted_panel(r: &mut ChaCha8Rng, q: usize) -> RegionPanel {
    let treated_states = r.random_range(6..=10);
    let control_states = r.random_range(3..=6);
    let mut states = Vec::new();
    let mut treated = Vec::new();
    let mut rows = Vec::new();
    let shift: Vec<f64> = (0..q).map(|_| r.random_range(0.5..1.5)).collect();
    for s in 0..treated_states + control_states {
        let is_treated = s < treated_states;
        let effect: Vec<f64> = (0..q).map(|_| 0.5 * normal(r)).collect();
        for _ in 0..r.random_range(2..=6) {
            states.push(format!("s{s}"));
            treated.push(is_treated);
            for j in 0..q {
                let base = if is_treated { 0.0 } else { shift[j] };
                rows.push(base + effect[j] + normal(r));
            }
        }
    }
    let n = states.len();
    let outcome = (0..n).map(|i| rows[i * q] + normal(r)).collect();
    RegionPanel::new(
        strings("x", 0..q),
        states,
        strings("r", 0..n),
        treated,
        outcome,
        DMatrix::from_row_slice(n, q, &rows),
        None,
    )
    .unwrap()
}

#[test]
fn c09_ridge_augmentation() {
    let mut r = rng(909);
    let mut worst_imbalance = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut augmented = 0;
    let mut panels = 0;
    while panels < 50 {
        let q = r.random_range(1..=3);
        let panel = shifted_panel(&mut r, q);
        let target = panel.control_mean();
        let config = EstimatorConfig::new(ToleranceSpec::uniform(1.5), r.random_range(0.0..0.6))
            .with_augmentation(Some(AugmentationSpec::default()));
        let Ok(run) = fit_weights(&panel, None, &config, &target, false) else { continue };
        panels += 1;
        augmented += run.lambda.is_some() as usize;
        let gamma = DVector::from_column_slice(run.weights());
        let achieved = panel.treated_covariates().transpose() * &gamma;
        for (a, v) in achieved.iter().zip(&target) {
            worst_imbalance = worst_imbalance.max((a - v).abs());
        }
        worst_sum = worst_sum.max((gamma.sum() - 1.0).abs());
    }
    verdict(
        9,
        "ridge augmentation meets the imbalance cap",
        worst_imbalance <= 0.5 && worst_sum <= 1e-10,
        format!(
            "max imbalance {worst_imbalance:.4} (cap 0.5), max |sum - 1| {worst_sum:.1e}, {augmented}/50 needed a ridge"
        ),
    );
}

#[test]
fn c10_jackknife_arithmetic() {
    let fixture = jackknife_from_estimates(&[1.0, 2.0, 3.0]);
    let fixture_ok = (fixture - 4.0 / 3.0).abs() < 1e-15;

    let mut r = rng(1010);
    let mut recomputed_exact = true;
    let mut checked = 0;
    while checked < 5 {
        let panel = shifted_panel(&mut r, 2);
        let config = EstimatorConfig::new(ToleranceSpec::uniform(0.3), 0.2);
        let Ok(full) = estimate_effect(&panel, None, &config) else { continue };
        checked += 1;
        let folds = full.trace.estimates();
        let m = folds.len() as f64;
        let center = folds.iter().sum::<f64>() / m;
        let spread: f64 = folds.iter().map(|s| (s - center).powi(2)).sum();
        recomputed_exact &= full.estimate.var_psi1 == Some((m - 1.0) / m * spread);
        for fold in &full.trace.folds {
            let reduced = panel.without_state(&fold.state).unwrap();
            let refit = fit_weights(&reduced, None, &config, &fold.target, true).unwrap();
            let y = reduced.outcome();
            let psi: f64 = refit.weights().iter().zip(reduced.treated_indices()).map(|(g, i)| g * y[i]).sum();
            recomputed_exact &= psi == fold.estimate;
        }
    }

    // Unscaled spread of fold estimates against the replication variance of a
    // single leave-one-out estimate.
    let run = coverage_cell();
    let outcomes: Vec<_> = run.outcomes[1].iter().flatten().filter(|o| o.jackknife_variance.is_some()).collect();
    let unscaled: Vec<f64> = outcomes
        .iter()
        .map(|o| {
            let m = o.fold_estimates.len() as f64;
            let c = o.fold_estimates.iter().sum::<f64>() / m;
            o.fold_estimates.iter().map(|s| (s - c).powi(2)).sum()
        })
        .collect();
    let first: Vec<f64> = outcomes.iter().map(|o| o.fold_estimates[0]).collect();
    let target = common::sample_variance(&first);
    let c = mean(&first);
    let fourth: Vec<f64> = first.iter().map(|s| (s - c).powi(2)).collect();
    let se = (mc_se(&unscaled).powi(2) + mc_se(&fourth).powi(2)).sqrt();
    let conservative = mean(&unscaled) >= target - 3.0 * se;

    verdict(
        10,
        "jackknife arithmetic and conservatism",
        fixture_ok && recomputed_exact && conservative,
        format!(
            "fixture {fixture:.15}, recomputation exact {recomputed_exact}, mean unscaled {:.5} vs leave-one-out var {target:.5} (3 SE {:.5})",
            mean(&unscaled),
            3.0 * se
        ),
    );
}

#[test]
fn c11_simulate_determinism() {
    let grid = r#"
taus = [0.9]
rho_xs = [0.0, 0.25]
size_models = [{ kind = "uniform", low = 300.0, high = 2300.0 }]
inputs = ["W", "X", "Xhat-hom", "Xhat-het", "Xhat-cor"]
rhos = [0.0, 0.25]
jackknife = true

[base]
n_sims = 20
base_seed = 7
"#;
    let dir = tempfile::tempdir().unwrap();
    let grid_path = dir.path().join("grid.toml");
    std::fs::write(&grid_path, grid).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        run_command(&RunConfig {
            command: Command::Simulate {
                grid: Some(grid_path.clone()),
                sims: None,
                seed: None,
                jackknife: None,
            },
            out_dir: out.clone(),
        })
        .unwrap();
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let first = run("a");
    let second = run("b");
    let rows = first.iter().filter(|b| **b == b'\n').count() - 1;
    verdict(
        11,
        "simulate is byte-for-byte reproducible",
        first == second && rows == 20,
        format!("{} bytes, {rows} metric rows, identical {}", first.len(), first == second),
    );
}
