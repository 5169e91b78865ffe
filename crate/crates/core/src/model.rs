//! Low-rank model state: configuration, SVD initialization, objective
//! evaluation, clear-sky prediction and the `SCSF1` model file.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScsfError};
use crate::operators::{check_tau, tilted_l1_scalar, DiffKind, DiffOperator};
use crate::timeseries::{flatten, PowerMatrix};
use crate::weights::{percentile, WeightParams};

/// Length of the year used by the periodic regularizer and the degradation coupling.
pub const YEAR: usize = 365;

const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub k: usize,
    pub tau: f64,
    /// Explicit intra-day smoothness weight; derived from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_l: Option<f64>,
    /// Explicit inter-day smoothness weight; derived from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_r: Option<f64>,
    pub mu_l_scale: f64,
    pub mu_r_scale: f64,
    /// Explicit night threshold; `night_fraction · max(D) · n` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub night_fraction: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub subproblem_tol: f64,
    pub subproblem_max_iter: usize,
    pub weights: WeightParams,
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_CONFIG).expect("bundled default config is valid")
    }
}

impl FitConfig {
    /// Defaults with the keys of a TOML document laid over them; nested
    /// tables merge key by key.
    pub fn overlay(text: &str) -> Result<FitConfig> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| ScsfError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(FitConfig::default()).map_err(|e| ScsfError::Config(e.to_string()))?;
        merge(&mut base, overlay);
        base.try_into().map_err(|e| ScsfError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(ScsfError::Config("rank k must be at least 1".into()));
        }
        check_tau(self.tau)?;
        for (name, v) in [("mu_l", self.mu_l), ("mu_r", self.mu_r)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(ScsfError::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !(self.mu_l_scale > 0.0) || !(self.mu_r_scale > 0.0) {
            return Err(ScsfError::Config("regularization scales must be positive".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0) {
                return Err(ScsfError::Config(format!("epsilon must be non-negative, got {e}")));
            }
        }
        if !(self.night_fraction >= 0.0) {
            return Err(ScsfError::Config("night_fraction must be non-negative".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.subproblem_tol > 0.0) {
            return Err(ScsfError::Config("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.subproblem_max_iter == 0 {
            return Err(ScsfError::Config("iteration caps must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn night_epsilon(&self, matrix: &PowerMatrix) -> f64 {
        self.epsilon
            .unwrap_or_else(|| self.night_fraction * matrix.max_observed() * matrix.n() as f64)
    }

    /// Concrete `(μ_L, μ_R)` for data whose top singular value is `sigma1`.
    pub fn resolve_mu(&self, sigma1: f64, m: usize, n: usize) -> (f64, f64) {
        (
            self.mu_l.unwrap_or(self.mu_l_scale * sigma1 / m as f64),
            self.mu_r.unwrap_or(self.mu_r_scale * sigma1 / n as f64),
        )
    }
}

/// Weights of the objective terms for a particular fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub tau: f64,
    pub mu_l: f64,
    pub mu_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub total: f64,
    /// weighted tilted-ℓ1 data misfit
    pub f1: f64,
    /// intra-day smoothness of `L`
    pub f2: f64,
    /// inter-day smoothness of `R`
    pub f3: f64,
    /// year-over-year periodicity of `R` without its first row
    pub f4: f64,
}

fn frobenius_of_rows(mat: &DMatrix<f64>, rows: std::ops::Range<usize>, kind: DiffKind) -> f64 {
    let n = mat.ncols();
    let Ok(op) = DiffOperator::new(kind, n) else { return 0.0 };
    let mut acc = 0.0;
    let mut buf = vec![0.0; op.output_len()];
    for p in rows {
        let row: Vec<f64> = mat.row(p).iter().copied().collect();
        op.apply_into(&row, &mut buf);
        acc += buf.iter().map(|v| v * v).sum::<f64>();
    }
    acc.sqrt()
}

/// Evaluate `f1 + f2 + f3 + f4` for factors `L` (m×k) and `R` (k×n).
/// Unobserved entries contribute nothing to `f1`.
pub fn objective(
    matrix: &PowerMatrix,
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    weights: &[f64],
    params: &ObjectiveParams,
) -> Result<ObjectiveParts> {
    let (m, n) = (matrix.m(), matrix.n());
    if l.nrows() != m || r.ncols() != n || l.ncols() != r.nrows() || weights.len() != n {
        return Err(ScsfError::Size(format!(
            "objective shapes: D {m}×{n}, L {}×{}, R {}×{}, w {}",
            l.nrows(),
            l.ncols(),
            r.nrows(),
            r.ncols(),
            weights.len()
        )));
    }
    check_tau(params.tau)?;
    let fit = l * r;
    let mut f1 = 0.0;
    for j in 0..n {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        for i in 0..m {
            if matrix.observed[(i, j)] {
                f1 += tilted_l1_scalar(w * (matrix.data[(i, j)] - fit[(i, j)]), params.tau);
            }
        }
    }
    let f2 = params.mu_l * frobenius_of_rows(&l.transpose(), 0..l.ncols(), DiffKind::Second);
    let f3 = params.mu_r * frobenius_of_rows(r, 0..r.nrows(), DiffKind::Second);
    let f4 = if n > YEAR {
        params.mu_r * frobenius_of_rows(r, 1..r.nrows(), DiffKind::FirstLagged { lag: YEAR })
    } else {
        0.0
    };
    Ok(ObjectiveParts { total: f1 + f2 + f3 + f4, f1, f2, f3, f4 })
}

/// Truncated SVD factors with the sign of each singular pair chosen so the
/// left vector has a non-negative sum. Unobserved entries are read as 0.
/// Returns `(L0, R0, σ)` where `σ` holds all singular values, descending.
pub fn svd_init(data: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let (m, n) = data.shape();
    if k == 0 || k > m.min(n) {
        return Err(ScsfError::Config(format!("rank {k} must lie in 1..={}", m.min(n))));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ScsfError::Numeric("non-finite entry in data matrix".into()));
    }
    let svd = data.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let mut l0 = DMatrix::zeros(m, k);
    let mut r0 = DMatrix::zeros(k, n);
    for (c, &src) in order.iter().take(k).enumerate() {
        let sign = if u.column(src).sum() < 0.0 { -1.0 } else { 1.0 };
        l0.set_column(c, &(u.column(src) * sign));
        r0.set_row(c, &(v_t.row(src) * (sign * svd.singular_values[src])));
    }
    Ok((l0, r0, sigma))
}

/// Fitted factorization `D ≈ L R`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankModel {
    pub l: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Year-over-year drop of the first row of `R`; present only for records
    /// longer than one year.
    pub beta: Option<f64>,
    pub night_rows: Vec<usize>,
    pub objective: ObjectiveParams,
    pub config: FitConfig,
}

impl LowRankModel {
    pub fn k(&self) -> usize {
        self.l.ncols()
    }

    pub fn m(&self) -> usize {
        self.l.nrows()
    }

    pub fn n(&self) -> usize {
        self.r.ncols()
    }

    pub fn raw_product(&self) -> DMatrix<f64> {
        &self.l * &self.r
    }

    /// `L R` with the small negative excursions left by the solver clamped to 0.
    pub fn clear_sky(&self) -> DMatrix<f64> {
        self.raw_product().map(|v| v.max(0.0))
    }

    /// Column-major flattening of [`clear_sky`](Self::clear_sky).
    pub fn clear_sky_series(&self) -> Vec<f64> {
        flatten(&self.clear_sky())
    }

    /// `β` relative to the median first-year first-row coefficient: the
    /// fractional loss of daily energy per year.
    pub fn degradation_rate(&self) -> Option<f64> {
        let beta = self.beta?;
        let first_year: Vec<f64> = self.r.row(0).iter().take(YEAR).copied().collect();
        let median = percentile(&first_year, 0.5)?;
        (median.abs() > 0.0).then(|| beta / median)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "SCSF1");
        let _ = writeln!(s, "m {}", self.m());
        let _ = writeln!(s, "n {}", self.n());
        let _ = writeln!(s, "k {}", self.k());
        match self.beta {
            Some(b) => {
                let _ = writeln!(s, "beta {b:?}");
            }
            None => {
                let _ = writeln!(s, "beta none");
            }
        }
        let night: Vec<String> = self.night_rows.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "night {}", night.join(" "));
        let _ = writeln!(s, "tau {:?}", self.objective.tau);
        let _ = writeln!(s, "mu_l {:?}", self.objective.mu_l);
        let _ = writeln!(s, "mu_r {:?}", self.objective.mu_r);
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let _ = writeln!(s, "config {config}");
        for (name, mat) in [("L", &self.l), ("R", &self.r)] {
            let _ = writeln!(s, "{name}");
            for row in mat.row_iter() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(s, "{}", vals.join(" "));
            }
        }
        w.write_all(s.as_bytes())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let bad = |msg: &str| ScsfError::ModelFormat(msg.to_string());
        let mut lines = reader.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .map_err(|e| ScsfError::ModelFormat(e.to_string()))
        };
        if next()?.trim() != "SCSF1" {
            return Err(bad("missing SCSF1 header"));
        }
        fn field(line: &str, key: &str) -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
                .map(|s| s.trim().to_string())
                .ok_or_else(|| ScsfError::ModelFormat(format!("expected `{key}` line, found {line:?}")))
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| ScsfError::ModelFormat(format!("bad number {s:?}")))
        }
        let m: usize = num(&field(&next()?, "m")?)?;
        let n: usize = num(&field(&next()?, "n")?)?;
        let k: usize = num(&field(&next()?, "k")?)?;
        let beta_raw = field(&next()?, "beta")?;
        let beta = if beta_raw == "none" { None } else { Some(num::<f64>(&beta_raw)?) };
        let night_raw = field(&next()?, "night")?;
        let night_rows = night_raw.split_whitespace().map(num::<usize>).collect::<Result<Vec<_>>>()?;
        let tau = num(&field(&next()?, "tau")?)?;
        let mu_l = num(&field(&next()?, "mu_l")?)?;
        let mu_r = num(&field(&next()?, "mu_r")?)?;
        let config: FitConfig = serde_json::from_str(&field(&next()?, "config")?)
            .map_err(|e| ScsfError::ModelFormat(format!("config: {e}")))?;
        let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            if next()?.trim() != name {
                return Err(ScsfError::ModelFormat(format!("expected `{name}` block")));
            }
            let mut vals = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                let row = line.split_whitespace().map(num::<f64>).collect::<Result<Vec<_>>>()?;
                if row.len() != cols {
                    return Err(ScsfError::ModelFormat(format!("{name} row has {} values, expected {cols}", row.len())));
                }
                vals.extend(row);
            }
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };
        let l = read_matrix("L", m, k)?;
        let r = read_matrix("R", k, n)?;
        Ok(LowRankModel { l, r, beta, night_rows, objective: ObjectiveParams { tau, mu_l, mu_r }, config })
    }
}
