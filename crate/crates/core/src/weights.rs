//! Per-day fit weights that concentrate the fit on approximately clear days.
//!
//! A day scores on two ramps: its energy relative to a high percentile of its
//! neighbours' energies, and the roughness of its intra-day profile relative
//! to the smoothest days around it. The weight is the product.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScsfError};
use crate::timeseries::PowerMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightParams {
    /// Half-width of the neighbourhood used for the local energy reference, in days.
    pub window: usize,
    /// Percentile (in `[0, 1]`) of neighbouring energies taken as the local reference.
    pub reference_quantile: f64,
    /// Energy ratio below which a day scores 0, and above which it scores 1.
    pub energy_ramp: (f64, f64),
    /// Half-width of the neighbourhood used for the roughness reference, in days.
    pub roughness_window: usize,
    /// Percentile of neighbouring roughness values used as the smooth-day reference.
    pub roughness_quantile: f64,
    /// Roughness, in multiples of the reference, at which the smoothness score
    /// starts to fall and where it reaches 0.
    pub roughness_ramp: (f64, f64),
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            window: 10,
            reference_quantile: 0.9,
            energy_ramp: (0.8, 0.95),
            roughness_window: 30,
            roughness_quantile: 0.1,
            roughness_ramp: (2.5, 5.0),
        }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.energy_ramp;
        if !(lo < hi) || lo < 0.0 {
            return Err(ScsfError::Config(format!("energy ramp must satisfy 0 ≤ lo < hi, got ({lo}, {hi})")));
        }
        let (rlo, rhi) = self.roughness_ramp;
        if !(rlo < rhi) || rlo < 0.0 {
            return Err(ScsfError::Config(format!("roughness ramp must satisfy 0 ≤ lo < hi, got ({rlo}, {rhi})")));
        }
        if !(0.0..=1.0).contains(&self.reference_quantile) || !(0.0..=1.0).contains(&self.roughness_quantile) {
            return Err(ScsfError::Config("weight quantiles must lie in [0, 1]".into()));
        }
        if self.window == 0 || self.roughness_window == 0 {
            return Err(ScsfError::Config("weight window must be at least 1 day".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayWeights {
    pub values: Vec<f64>,
    pub energy_score: Vec<f64>,
    pub smoothness_score: Vec<f64>,
    pub params: WeightParams,
}

impl DayWeights {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&w| w > threshold).count()
    }
}

/// Linear-interpolation percentile of unsorted data, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

fn ramp(x: f64, lo: f64, hi: f64) -> f64 {
    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Column sums over observed entries, rescaled by `m / observed` so partial
/// days are comparable to full ones. Fully missing days get 0.
pub fn daily_energy(matrix: &PowerMatrix) -> Vec<f64> {
    let m = matrix.m();
    (0..matrix.n())
        .map(|j| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..m {
                if matrix.observed[(i, j)] {
                    sum += matrix.data[(i, j)];
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum * m as f64 / count as f64
            }
        })
        .collect()
}

/// `‖diff2(column)‖₂ / max(energy, floor)` over daytime rows, using only
/// second differences whose three samples are all observed.
fn roughness(matrix: &PowerMatrix, day_rows: &[usize], j: usize, energy: f64, floor: f64) -> Option<f64> {
    if energy <= floor {
        return None;
    }
    let mut acc = 0.0;
    let mut terms = 0usize;
    for w in day_rows.windows(3) {
        if w[1] != w[0] + 1 || w[2] != w[1] + 1 {
            continue;
        }
        if w.iter().all(|&i| matrix.observed[(i, j)]) {
            let d = matrix.data[(w[0], j)] - 2.0 * matrix.data[(w[1], j)] + matrix.data[(w[2], j)];
            acc += d * d;
            terms += 1;
        }
    }
    (terms > 0).then(|| acc.sqrt() / energy.max(floor))
}

/// Energy-normalized roughness of each day; `None` for days without usable samples.
pub fn day_roughness(matrix: &PowerMatrix) -> Vec<Option<f64>> {
    let energy = daily_energy(matrix);
    let floor = 1e-8 * matrix.max_observed();
    let day_rows = matrix.day_rows();
    (0..matrix.n())
        .map(|j| roughness(matrix, &day_rows, j, energy[j], floor))
        .collect()
}

/// Per-day weights in `[0, 1]`. Night rows are taken from `matrix.night_rows`.
pub fn compute_weights(matrix: &PowerMatrix, params: &WeightParams) -> Result<DayWeights> {
    params.validate()?;
    let n = matrix.n();
    if n < 3 {
        return Err(ScsfError::Config(format!("weights need at least 3 days, got {n}")));
    }
    let energy = daily_energy(matrix);
    let has_data: Vec<bool> = (0..n).map(|j| matrix.observed.column(j).iter().any(|&o| o)).collect();
    let floor = 1e-8 * matrix.max_observed();

    let (elo, ehi) = params.energy_ramp;
    let energy_score: Vec<f64> = (0..n)
        .map(|j| {
            if !has_data[j] {
                return 0.0;
            }
            let lo = j.saturating_sub(params.window);
            let hi = (j + params.window).min(n - 1);
            let neighbours: Vec<f64> = (lo..=hi).filter(|&l| has_data[l]).map(|l| energy[l]).collect();
            let reference = percentile(&neighbours, params.reference_quantile).unwrap_or(0.0);
            if reference <= floor {
                0.0
            } else {
                ramp(energy[j] / reference, elo, ehi)
            }
        })
        .collect();

    let rough = day_roughness(matrix);
    let (rlo, rhi) = params.roughness_ramp;
    let smoothness_score: Vec<f64> = (0..n)
        .map(|j| {
            let Some(s) = rough[j] else { return 0.0 };
            let lo = j.saturating_sub(params.roughness_window);
            let hi = (j + params.roughness_window).min(n - 1);
            let neighbours: Vec<f64> = rough[lo..=hi].iter().flatten().copied().collect();
            let reference = percentile(&neighbours, params.roughness_quantile).unwrap_or(0.0);
            if reference <= 0.0 {
                // flat neighbourhood: only perfectly flat days count as smooth
                if s <= 0.0 { 1.0 } else { 0.0 }
            } else {
                1.0 - ramp(s / reference, rlo, rhi)
            }
        })
        .collect();

    let values = energy_score.iter().zip(&smoothness_score).map(|(a, b)| a * b).collect();
    Ok(DayWeights { values, energy_score, smoothness_score, params: *params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{corrupt, generate, Corruption, SyntheticSpec};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn synthetic(m: usize, n: usize) -> PowerMatrix {
        let spec = SyntheticSpec { samples_per_day: m, days: n, ..Default::default() };
        let (clean, _) = generate(&spec).unwrap();
        let eps = clean.default_night_epsilon();
        clean.with_night_rows(eps)
    }

    #[test]
    fn energy_examples() {
        let mut data = DMatrix::from_element(24, 3, 1.0);
        data.column_mut(0).fill(0.0);
        let mut observed = DMatrix::from_element(24, 3, true);
        for i in 0..12 {
            observed[(i, 2)] = false;
        }
        let e = daily_energy(&PowerMatrix::from_parts(data, observed));
        assert_eq!(e, vec![0.0, 24.0, 24.0]);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(percentile(&[1.0, 2.0], 0.9), Some(1.9));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn clean_days_all_count() {
        let spec = SyntheticSpec { samples_per_day: 96, days: 365, latitude_proxy: 0.0, ..Default::default() };
        let (flat, _) = generate(&spec).unwrap();
        let flat = flat.clone().with_night_rows(flat.default_night_epsilon());
        let w = compute_weights(&flat, &WeightParams::default()).unwrap();
        assert!(w.energy_score.iter().all(|&a| a == 1.0));

        // With seasons the windowed percentile runs ahead of the day itself
        // while energy is rising, so a dips below 1 but stays positive.
        let mat = synthetic(96, 365);
        let w = compute_weights(&mat, &WeightParams::default()).unwrap();
        let min_a = w.energy_score.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_a > 0.85, "min energy score {min_a}");
        let min = w.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "min weight {min}");
    }

    #[test]
    fn cloudy_day_gets_zero_weight() {
        let mut mat = synthetic(96, 120);
        let j = 57;
        mat.data.column_mut(j).scale_mut(0.3);
        let w = compute_weights(&mat, &WeightParams::default()).unwrap();
        assert_eq!(w.energy_score[j], 0.0);
        assert_eq!(w.values[j], 0.0);
    }

    #[test]
    fn rough_day_gets_zero_smoothness() {
        let mat = synthetic(288, 365);
        let c = Corruption { day_fraction: 0.3, ..Default::default() };
        let bad = corrupt(&mat, &c).unwrap();
        let w = compute_weights(&bad, &WeightParams::default()).unwrap();
        for j in c.selected_days(365) {
            assert_eq!(w.smoothness_score[j], 0.0, "day {j}");
            assert_eq!(w.values[j], 0.0);
        }
    }

    #[test]
    fn missing_days_get_zero() {
        let mut mat = synthetic(48, 30);
        mat.observed.column_mut(4).fill(false);
        mat.data.column_mut(4).fill(0.0);
        let w = compute_weights(&mat, &WeightParams::default()).unwrap();
        assert_eq!(w.values[4], 0.0);
    }

    #[test]
    fn too_few_days_is_config_error() {
        let mat = PowerMatrix::from_dense(DMatrix::from_element(4, 2, 1.0));
        assert!(matches!(compute_weights(&mat, &WeightParams::default()), Err(ScsfError::Config(_))));
    }

    #[test]
    fn locality_under_far_swaps() {
        let spec = SyntheticSpec { samples_per_day: 48, days: 200, ..Default::default() };
        let (clean, _) = generate(&spec).unwrap();
        let bad = corrupt(&clean, &Corruption { seed: 3, ..Default::default() }).unwrap().with_night_rows(1e-9);
        let params = WeightParams::default();
        let base = compute_weights(&bad, &params).unwrap();
        let (a, b) = (20usize, 150usize);
        let mut swapped = bad.clone();
        swapped.data.swap_columns(a, b);
        let w = compute_weights(&swapped, &params).unwrap();
        let reach = params.window.max(params.roughness_window);
        for j in 0..200usize {
            if j.abs_diff(a) > reach && j.abs_diff(b) > reach {
                assert_eq!(w.values[j], base.values[j], "day {j}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn weights_scale_invariant_and_bounded(scale in 0.01f64..100.0, seed in 0u64..1000) {
            let spec = SyntheticSpec { samples_per_day: 24, days: 60, ..Default::default() };
            let (clean, _) = generate(&spec).unwrap();
            let bad = corrupt(&clean, &Corruption { seed, ..Default::default() }).unwrap().with_night_rows(1e-6);
            let mut scaled = bad.clone();
            scaled.data *= scale;
            let a = compute_weights(&bad, &WeightParams::default()).unwrap();
            let b = compute_weights(&scaled, &WeightParams::default()).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((0.0..=1.0).contains(x));
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
