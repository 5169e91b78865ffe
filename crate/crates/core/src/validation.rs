//! Hold-out checks for overfitting: random day splits, residual sets and the
//! two-sample Kolmogorov–Smirnov statistic.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScsfError};
use crate::model::{FitConfig, LowRankModel};
use crate::solver::{fit_weights, fit_with_weights, FitReport};
use crate::synthetic::rounded_count;
use crate::timeseries::PowerMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Measured minus estimated power over daytime, observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub values: Vec<f64>,
    pub label: Split,
    pub day_indices: Vec<usize>,
}

/// Random train/test partition of `0..n`. The test set has
/// `round(n · frac)` days, ties to even.
pub fn split_days(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(ScsfError::Config(format!("test fraction must be in (0, 1), got {frac}")));
    }
    let count = rounded_count(n, frac);
    if count == 0 {
        return Err(ScsfError::Config(format!("test fraction {frac} of {n} days selects no day")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = index::sample(&mut rng, n, count).into_vec();
    test.sort_unstable();
    let held: BTreeSet<usize> = test.iter().copied().collect();
    let train = (0..n).filter(|j| !held.contains(j)).collect();
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct Holdout {
    pub model: LowRankModel,
    pub report: FitReport,
    pub train: ResidualSet,
    pub test: ResidualSet,
}

/// Fit with the test days masked out and zero-weighted, then collect
/// residuals on both sides of the split.
pub fn holdout_fit(matrix: &PowerMatrix, config: &FitConfig, test_days: &[usize]) -> Result<Holdout> {
    let n = matrix.n();
    if let Some(&bad) = test_days.iter().find(|&&j| j >= n) {
        return Err(ScsfError::Config(format!("test day {bad} out of range for {n} days")));
    }
    let held: BTreeSet<usize> = test_days.iter().copied().collect();
    let mut masked = matrix.clone();
    for &j in &held {
        for i in 0..masked.m() {
            masked.observed[(i, j)] = false;
            masked.data[(i, j)] = 0.0;
        }
    }
    let (mut weights, _) = fit_weights(&masked, config)?;
    for &j in &held {
        weights.values[j] = 0.0;
    }
    let (model, report) = fit_with_weights(&masked, config, weights)?;
    let train_days: Vec<usize> = (0..n).filter(|j| !held.contains(j)).collect();
    let test_days: Vec<usize> = held.into_iter().collect();
    let train = residuals(matrix, &model, &train_days, Split::Train);
    let test = residuals(matrix, &model, &test_days, Split::Test);
    Ok(Holdout { model, report, train, test })
}

/// Residuals of `model` against `matrix` on the given days, skipping night
/// rows and missing samples.
pub fn residuals(matrix: &PowerMatrix, model: &LowRankModel, days: &[usize], label: Split) -> ResidualSet {
    let estimate = model.clear_sky();
    let night: BTreeSet<usize> = model.night_rows.iter().copied().collect();
    let mut values = Vec::new();
    for &j in days {
        for i in (0..matrix.m()).filter(|i| !night.contains(i)) {
            if matrix.observed[(i, j)] {
                values.push(matrix.data[(i, j)] - estimate[(i, j)]);
            }
        }
    }
    ResidualSet { values, label, day_indices: days.to_vec() }
}

/// Right-continuous empirical distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Distinct sample values with the cumulative fraction reached at each.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (idx, &v) in self.sorted.iter().enumerate() {
            let frac = (idx + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => out.push((v, frac)),
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

pub fn empirical_cdf(samples: &[f64]) -> Result<Ecdf> {
    if samples.is_empty() {
        return Err(ScsfError::Size("empirical CDF of an empty sample".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(ScsfError::Numeric("NaN in sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(Ecdf { sorted })
}

/// `sup_x |F_a(x) − F_b(x)|`, evaluated exactly by a merge over both samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let fa = empirical_cdf(a)?;
    let fb = empirical_cdf(b)?;
    let (xa, xb) = (&fa.sorted, &fb.sorted);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    // Both ECDFs are flat between sample points, so checking just after each
    // distinct value covers the right limits; left limits equal the previous
    // step's value.
    while i < xa.len() || j < xb.len() {
        let x = match (xa.get(i), xb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

/// Asymptotic two-sample rejection threshold `c(α) · sqrt((n1 + n2) / (n1 n2))`
/// with `c(α) = sqrt(−ln(α/2) / 2)`.
pub fn ks_threshold(alpha: f64, n1: usize, n2: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ScsfError::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if n1 == 0 || n2 == 0 {
        return Err(ScsfError::Size("sample sizes must be positive".into()));
    }
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (a, b) = (n1 as f64, n2 as f64);
    Ok(c * ((a + b) / (a * b)).sqrt())
}
