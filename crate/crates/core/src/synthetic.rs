//! Toy clear-sky generator and the random-day corruption procedure used for
//! reconstruction experiments.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScsfError};
use crate::timeseries::PowerMatrix;

/// Exponent applied to the cosine day profile.
const PROFILE_EXPONENT: f64 = 1.5;
/// Day-of-year shift so that column 0 sits ten days after the winter solstice.
const SOLSTICE_SHIFT: f64 = 10.0;

/// Winter-time multiplicative dip at a fixed time of day (e.g. a tree or a
/// neighbouring building). Positions are fractions of the day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadeProfile {
    pub center: f64,
    pub width: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub days: usize,
    pub samples_per_day: usize,
    pub peak_power: f64,
    /// Seasonal modulation strength in `[0, 0.5]`; 0 gives identical days.
    pub latitude_proxy: f64,
    pub shade: Option<ShadeProfile>,
    /// Fractional output loss per 365 days.
    pub degradation_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            days: 365,
            samples_per_day: 288,
            peak_power: 5.0,
            latitude_proxy: 0.25,
            shade: None,
            degradation_rate: 0.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.days == 0 || self.samples_per_day < 4 {
            return Err(ScsfError::Config("synthetic spec needs days ≥ 1 and samples_per_day ≥ 4".into()));
        }
        if !(0.0..=0.5).contains(&self.latitude_proxy) {
            return Err(ScsfError::Config(format!(
                "latitude_proxy must be in [0, 0.5], got {}",
                self.latitude_proxy
            )));
        }
        if !(self.peak_power > 0.0) || !self.peak_power.is_finite() {
            return Err(ScsfError::Config("peak_power must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.degradation_rate) {
            return Err(ScsfError::Config("degradation_rate must be in [0, 1)".into()));
        }
        if let Some(s) = self.shade {
            if !(0.0..=1.0).contains(&s.depth) || !(s.width > 0.0) {
                return Err(ScsfError::Config("shade depth must be in [0, 1] and width positive".into()));
            }
        }
        Ok(())
    }

    fn season(&self, day: usize) -> f64 {
        -(2.0 * PI * (day as f64 + SOLSTICE_SHIFT) / 365.0).cos()
    }

    /// Daylight duration of `day`, in samples.
    pub fn day_length(&self, day: usize) -> f64 {
        0.5 * self.samples_per_day as f64 * (1.0 + self.latitude_proxy * self.season(day))
    }

    /// Shortest daylight duration over the record, in samples.
    pub fn min_day_length(&self) -> f64 {
        (0..self.days).map(|j| self.day_length(j)).fold(f64::INFINITY, f64::min)
    }

    pub fn amplitude(&self, day: usize) -> f64 {
        let seasonal = (1.0 + self.latitude_proxy * self.season(day)) / (1.0 + self.latitude_proxy);
        let aging = (1.0 - self.degradation_rate).powf(day as f64 / 365.0);
        self.peak_power * seasonal * aging
    }

    fn noon(&self) -> f64 {
        self.samples_per_day as f64 / 2.0
    }

    fn profile(&self, row: usize, day: usize) -> f64 {
        let c = (PI * (row as f64 - self.noon()) / self.day_length(day)).cos();
        if c <= 0.0 {
            0.0
        } else {
            c.powf(PROFILE_EXPONENT)
        }
    }

    fn shade_factor(&self, row: usize, day: usize) -> f64 {
        match self.shade {
            None => 1.0,
            Some(s) => {
                let m = self.samples_per_day as f64;
                let z = (row as f64 - s.center * m) / (s.width * m);
                let winter = 0.5 * (1.0 - self.season(day));
                1.0 - s.depth * (-z * z).exp() * winter
            }
        }
    }

    /// Rows that receive sunlight on at least one day of the record.
    pub fn daylight_rows(&self) -> Vec<usize> {
        (0..self.samples_per_day)
            .filter(|&i| (0..self.days).any(|j| self.profile(i, j) > 0.0))
            .collect()
    }

    /// Rows the generator never illuminates.
    pub fn night_rows(&self) -> Vec<usize> {
        let lit = self.daylight_rows();
        (0..self.samples_per_day).filter(|i| lit.binary_search(i).is_err()).collect()
    }
}

/// Clean clear-sky matrix (fully observed) and the ground truth it was built from.
pub fn generate(spec: &SyntheticSpec) -> Result<(PowerMatrix, DMatrix<f64>)> {
    spec.validate()?;
    let truth = DMatrix::from_fn(spec.samples_per_day, spec.days, |i, j| {
        spec.amplitude(j) * spec.profile(i, j) * spec.shade_factor(i, j)
    });
    Ok((PowerMatrix::from_dense(truth.clone()), truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub day_fraction: f64,
    pub factor_range: (f64, f64),
    /// One factor per selected day instead of one per sample.
    pub per_day: bool,
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption { day_fraction: 0.3, factor_range: (0.0, 1.1), per_day: false, seed: 7 }
    }
}

/// `round(n · fraction)` with ties to even.
pub fn rounded_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round_ties_even() as usize
}

impl Corruption {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.day_fraction) {
            return Err(ScsfError::Config(format!("day_fraction must be in [0, 1], got {}", self.day_fraction)));
        }
        let (lo, hi) = self.factor_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ScsfError::Config(format!("invalid factor range ({lo}, {hi})")));
        }
        Ok(())
    }

    fn selection(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let count = rounded_count(n, self.day_fraction).min(n);
        let mut days = index::sample(rng, n, count).into_vec();
        days.sort_unstable();
        days
    }

    /// Days that [`corrupt`] modifies for an `n`-day matrix.
    pub fn selected_days(&self, n: usize) -> Vec<usize> {
        self.selection(n, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }
}

/// Multiply every sample on a random subset of days by uniform random factors.
pub fn corrupt(matrix: &PowerMatrix, corruption: &Corruption) -> Result<PowerMatrix> {
    corruption.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(corruption.seed);
    let days = corruption.selection(matrix.n(), &mut rng);
    let (lo, hi) = corruption.factor_range;
    let mut out = matrix.clone();
    for &j in &days {
        let day_factor = rng.random_range(lo..=hi);
        for i in 0..matrix.m() {
            let f = if corruption.per_day { day_factor } else { rng.random_range(lo..=hi) };
            out.data[(i, j)] *= f;
        }
    }
    Ok(out)
}
