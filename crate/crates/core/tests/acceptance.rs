//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsf_core::admm::AdmmSettings;
use scsf_core::model::{svd_init, FitConfig, LowRankModel};
use scsf_core::operators::{prox_tilted_l1_scalar, tilted_l1_scalar};
use scsf_core::solver::{fit, solve_l_step, solve_r_step, FitReport};
use scsf_core::synthetic::{corrupt, generate, Corruption, SyntheticSpec};
use scsf_core::validation::{holdout_fit, ks_statistic, ks_threshold, split_days};
use scsf_core::PowerMatrix;

struct Run {
    label: String,
    data: PowerMatrix,
    truth: DMatrix<f64>,
    model: LowRankModel,
    report: FitReport,
    elapsed: Duration,
}

fn run(label: &str, spec: SyntheticSpec, corrupted: bool) -> Run {
    let (clean, truth) = generate(&spec).expect("generator");
    let data = if corrupted { corrupt(&clean, &Corruption::default()).expect("corruption") } else { clean };
    let start = Instant::now();
    let (model, report) = fit(&data, &FitConfig::default()).expect("fit");
    let elapsed = start.elapsed();
    println!(
        "  fitted {label}: {} outer iterations, converged={}, {:.1?}",
        report.iterations, report.converged, elapsed
    );
    Run { label: label.into(), data, truth, model, report, elapsed }
}

/// RMSE against ground truth as a percentage of the ground-truth peak.
fn rmse_percent(r: &Run) -> f64 {
    let diff = r.model.clear_sky() - &r.truth;
    let rmse = (diff.norm_squared() / diff.len() as f64).sqrt();
    100.0 * rmse / r.truth.max()
}

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        println!("[{}] criterion {id}: {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn reconstruction(gate: &mut Gate, large: &Run, small: &Run) {
    let big = rmse_percent(large);
    let fast = rmse_percent(small);
    let ok = big < 0.5 && fast < 1.0 && small.elapsed < Duration::from_secs(60);
    gate.check(
        1,
        "synthetic reconstruction",
        ok,
        format!(
            "m=288 RMSE {big:.4}% (< 0.5%) in {:.1?}; m=24 RMSE {fast:.4}% (< 1.0%) in {:.1?} (< 60 s)",
            large.elapsed, small.elapsed
        ),
    );
}

fn convergence(gate: &mut Gate, runs: &[&Run]) {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let within = r.report.relative_changes().iter().position(|&c| c < 1e-3).map(|t| t + 1);
        ok &= matches!(within, Some(t) if t <= 15);
        let at = within.map_or("never".to_string(), |t| format!("after {t} iterations"));
        parts.push(format!("{} below 0.1% {at}", r.label));
    }
    gate.check(2, "outer convergence", ok, parts.join("; "));
}

fn monotonicity(gate: &mut Gate, runs: &[&Run]) {
    let mut worst: f64 = f64::NEG_INFINITY;
    for r in runs {
        let trace: Vec<f64> = r.report.objective_trace.iter().map(|p| p.total).collect();
        for w in trace.windows(2) {
            worst = worst.max((w[1] - w[0]) / trace[0]);
        }
    }
    gate.check(3, "monotone objective", worst <= 1e-6, format!("largest relative increase {worst:.3e} (≤ 1e-6) over {} fits", runs.len()));
}

fn constraints(gate: &mut Gate, runs: &[&Run]) {
    let mut sums: f64 = 0.0;
    let mut night_ok = true;
    let mut negative: f64 = 0.0;
    let mut coupling: f64 = 0.0;
    for r in runs {
        let model = &r.model;
        for c in 1..model.k() {
            sums = sums.max(model.l.column(c).sum().abs());
        }
        for &i in &model.night_rows {
            night_ok &= model.l.row(i).iter().all(|&v| v == 0.0);
        }
        let lr = model.raw_product();
        negative = negative.max(-lr.min() / lr.max());
        if model.n() > 365 {
            let beta = model.beta.expect("beta for multi-year fits");
            for j in 0..model.n() - 365 {
                coupling = coupling.max((model.r[(0, j)] - model.r[(0, j + 365)] - beta).abs());
            }
        }
    }
    let ok = sums <= 1e-8 && night_ok && negative <= 1e-6 && coupling <= 1e-6;
    gate.check(
        4,
        "constraint suite",
        ok,
        format!(
            "max |column sum| {sums:.2e}, night rows zero {night_ok}, max -min(LR)/max(LR) {negative:.2e}, coupling error {coupling:.2e}"
        ),
    );
}

fn degradation(gate: &mut Gate, aging: &Run, flat: &Run) {
    let rate = aging.model.degradation_rate().unwrap_or(f64::NAN);
    let beta = flat.model.beta.unwrap_or(f64::NAN);
    let scale = flat.model.r.row(0).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let ok = (rate - 0.05).abs() <= 0.01 && beta.abs() <= 1e-3 * scale;
    gate.check(
        5,
        "degradation recovery",
        ok,
        format!("rate 0.05 -> estimated {rate:.4}; rate 0 -> |beta| {:.2e} vs bound {:.2e}", beta.abs(), 1e-3 * scale),
    );
}

fn overfitting(gate: &mut Gate, data: &PowerMatrix) {
    let (_, test) = split_days(data.n(), 0.1, 1).expect("split");
    let holdout = holdout_fit(data, &FitConfig::default(), &test).expect("holdout fit");
    let (a, b) = (&holdout.train.values, &holdout.test.values);
    let ks = ks_statistic(a, b).expect("ks");
    let limit = ks_threshold(1e-10, a.len(), b.len()).expect("threshold");
    gate.check(6, "hold-out KS", ks < limit, format!("KS {ks:.4} vs threshold {limit:.4} (n_train {}, n_test {})", a.len(), b.len()));
}

fn oracle_equivalence(gate: &mut Gate) {
    let settings = AdmmSettings { tol: 1e-6, max_iter: 5000 };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let t = common::toy(seed);
        let (l, _) = solve_l_step(&t.matrix, &t.r0, &t.weights, &t.params, &settings, &t.l0).expect("L-step");
        let ours = common::l_objective(&t.matrix, &l, &t.r0, &t.weights, &t.params);
        let (_, reference) = common::l_step_oracle(&t.matrix, &t.r0, &t.weights, &t.params);
        worst = worst.max((ours - reference).abs() / reference.abs());
        let (r, _, _) = solve_r_step(&t.matrix, &l, &t.weights, &t.params, &settings, &t.r0, None).expect("R-step");
        let ours = common::r_objective(&t.matrix, &l, &r, &t.weights, &t.params);
        let (_, reference) = common::r_step_oracle(&t.matrix, &l, &t.weights, &t.params);
        worst = worst.max((ours - reference).abs() / reference.abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut prox_err: f64 = 0.0;
    for _ in 0..100 {
        let (v, tau, step) = (rng.random_range(-2.0..2.0), rng.random_range(0.05..0.95), rng.random_range(0.05..1.0));
        let mut best = (f64::INFINITY, 0.0);
        for idx in 0..=600_000 {
            let x = -3.0 + idx as f64 * 1e-5;
            let value = step * tilted_l1_scalar(x, tau) + 0.5 * (x - v) * (x - v);
            if value < best.0 {
                best = (value, x);
            }
        }
        prox_err = prox_err.max((prox_tilted_l1_scalar(v, tau, step) - best.1).abs());
    }
    gate.check(
        7,
        "oracle equivalence",
        worst < 1e-4 && prox_err < 1e-4,
        format!("subproblem max relative gap {worst:.2e} over 20 toys; prox max error {prox_err:.2e} over 100 inputs"),
    );
}

fn eckart_young(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (m, n) = (rng.random_range(3..12), rng.random_range(3..12));
        let k = rng.random_range(1..=m.min(n));
        let d = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let (l0, r0, _) = svd_init(&d, k).expect("svd_init");
        let residual = (&d - &l0 * &r0).norm_squared();
        let gram = if m <= n { &d * d.transpose() } else { d.transpose() * &d };
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let tail: f64 = eig[k..].iter().sum();
        let scale = d.norm_squared();
        worst = worst.max((residual - tail).abs() / tail.max(1e-12 * scale));
    }
    gate.check(8, "truncated SVD tail energy", worst < 1e-9, format!("max relative error {worst:.2e} over 20 matrices"));
}

fn residual_skew(gate: &mut Gate, runs: &[&Run]) {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let lr = r.model.raw_product();
        let (mut nonpos, mut total) = (0usize, 0usize);
        for j in 0..r.data.n() {
            if r.report.weights_used.values[j] <= 0.0 {
                continue;
            }
            for i in r.data.day_rows() {
                if r.data.observed[(i, j)] {
                    total += 1;
                    nonpos += usize::from(r.data.data[(i, j)] - lr[(i, j)] <= 0.0);
                }
            }
        }
        let frac = nonpos as f64 / total as f64;
        ok &= frac >= 0.8;
        parts.push(format!("{} {frac:.3}", r.label));
    }
    gate.check(9, "residual skew", ok, format!("fraction of daytime residuals ≤ 0 (≥ 0.8): {}", parts.join(", ")));
}

fn main() -> ExitCode {
    let year = |m: usize| SyntheticSpec { days: 365, samples_per_day: m, ..SyntheticSpec::default() };
    let two_years = |rate: f64| SyntheticSpec { days: 730, samples_per_day: 24, degradation_rate: rate, ..SyntheticSpec::default() };

    let large = run("m=288 corrupted", year(288), true);
    let small = run("m=24 corrupted", year(24), true);
    let aging = run("two years, rate 0.05", two_years(0.05), false);
    let flat = run("two years, rate 0", two_years(0.0), false);
    let all = [&large, &small, &aging, &flat];

    let mut gate = Gate { failures: 0 };
    reconstruction(&mut gate, &large, &small);
    convergence(&mut gate, &[&large, &small]);
    monotonicity(&mut gate, &all);
    constraints(&mut gate, &all);
    degradation(&mut gate, &aging, &flat);
    overfitting(&mut gate, &small.data);
    oracle_equivalence(&mut gate);
    eckart_young(&mut gate);
    residual_skew(&mut gate, &[&large, &small]);

    println!("acceptance: {} of 9 criteria failed", gate.failures);
    if gate.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
