//! Alternating minimization over `L` and `(R, β)`.
//!
//! Each half-step is convex and is solved by the splitting method in
//! [`crate::admm`]. The entries of `LR` form one block whose prox applies the
//! weighted tilted-ℓ1 loss and then clips at zero; each difference-operator
//! image goes through block shrinkage. Night rows of `L` and the
//! first-row year-over-year coupling of `R` are removed by
//! reparameterization; the zero-sum constraints on `L` are kept as equality
//! rows of the linear system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmSettings, AdmmStats, Block, DualState, LinearMaps, Penalty};
use crate::error::{Result, ScsfError};
use crate::linalg::SymmetricAssembler;
use crate::model::{objective, svd_init, FitConfig, LowRankModel, ObjectiveParams, ObjectiveParts, YEAR};
use crate::timeseries::PowerMatrix;
use crate::weights::{compute_weights, DayWeights};

const D2: [(usize, f64); 3] = [(0, 1.0), (1, -2.0), (2, 1.0)];

/// Minimum number of days with weight above [`USABLE_WEIGHT`] before the
/// energy ramp is relaxed.
const MIN_USABLE_DAYS: usize = 5;
const USABLE_WEIGHT: f64 = 0.1;
const RELAXED_ENERGY_FLOOR: f64 = 0.6;

/// Per-entry loss weights and targets for the day rows of `D`, laid out as
/// `pos · n + j`. Unobserved entries and zero-weight days get weight 0.
fn loss_terms(matrix: &PowerMatrix, day_rows: &[usize], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = matrix.n();
    let mut weight = vec![0.0; day_rows.len() * n];
    let mut target = vec![0.0; day_rows.len() * n];
    for (pos, &i) in day_rows.iter().enumerate() {
        for j in 0..n {
            if matrix.observed[(i, j)] && weights[j] > 0.0 {
                weight[pos * n + j] = weights[j];
                target[pos * n + j] = matrix.data[(i, j)];
            }
        }
    }
    (weight, target)
}

fn settings_from(config: &FitConfig) -> AdmmSettings {
    AdmmSettings { tol: config.subproblem_tol, max_iter: config.subproblem_max_iter }
}

// ---------------------------------------------------------------------------
// L-step

struct LStep<'a> {
    m: usize,
    k: usize,
    n: usize,
    day_rows: Vec<usize>,
    /// full row → position among day rows
    row_pos: Vec<Option<usize>>,
    r: &'a DMatrix<f64>,
    weight: Vec<f64>,
    target: Vec<f64>,
    has_smooth: bool,
}

impl<'a> LStep<'a> {
    fn new(matrix: &PowerMatrix, r: &'a DMatrix<f64>, weights: &[f64]) -> Self {
        let m = matrix.m();
        let day_rows = matrix.day_rows();
        let mut row_pos = vec![None; m];
        for (p, &i) in day_rows.iter().enumerate() {
            row_pos[i] = Some(p);
        }
        let (weight, target) = loss_terms(matrix, &day_rows, weights);
        LStep { m, k: r.nrows(), n: r.ncols(), day_rows, row_pos, r, weight, target, has_smooth: m >= 3 }
    }

    fn var(&self, pos: usize, p: usize) -> usize {
        pos * self.k + p
    }

    fn blocks(&self, params: &ObjectiveParams) -> Vec<Block> {
        let nv = self.n_vars();
        let k = self.k;
        let mut out = Vec::new();

        let mut gram = SymmetricAssembler::new(nv, 0);
        let rrt = self.r * self.r.transpose();
        for pos in 0..self.day_rows.len() {
            add_dense_block(&mut gram, &rrt, |p| self.var(pos, p));
        }
        out.push(Block {
            penalty: Penalty::TiltedNonNeg { tau: params.tau, weight: self.weight.clone(), target: self.target.clone() },
            offset: vec![0.0; self.weight.len()],
            gram,
        });

        if self.has_smooth {
            let mut gram = SymmetricAssembler::new(nv, 0);
            for t in 0..self.m - 2 {
                for &(a, ca) in &D2 {
                    for &(b, cb) in &D2 {
                        if let (Some(pa), Some(pb)) = (self.row_pos[t + a], self.row_pos[t + b]) {
                            for p in 0..k {
                                gram.add(self.var(pa, p), self.var(pb, p), ca * cb);
                            }
                        }
                    }
                }
            }
            out.push(Block {
                penalty: Penalty::Norm { scale: params.mu_l },
                offset: vec![0.0; (self.m - 2) * k],
                gram,
            });
        }
        out
    }

    fn constraints(&self) -> Vec<Vec<(usize, f64)>> {
        (1..self.k)
            .map(|p| (0..self.day_rows.len()).map(|pos| (self.var(pos, p), 1.0)).collect())
            .collect()
    }

    /// Project onto the zero-sum constraints.
    fn center(&self, x: &mut [f64]) {
        let rows = self.day_rows.len();
        for p in 1..self.k {
            let mean = (0..rows).map(|pos| x[self.var(pos, p)]).sum::<f64>() / rows as f64;
            for pos in 0..rows {
                x[self.var(pos, p)] -= mean;
            }
        }
    }

    fn pack(&self, l: &DMatrix<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_vars());
        for &i in &self.day_rows {
            x.extend(l.row(i).iter());
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.m, self.k);
        for (pos, &i) in self.day_rows.iter().enumerate() {
            for p in 0..self.k {
                l[(i, p)] = x[self.var(pos, p)];
            }
        }
        l
    }
}

impl LinearMaps for LStep<'_> {
    fn n_vars(&self) -> usize {
        self.day_rows.len() * self.k
    }

    fn forward(&self, x: &[f64], out: &mut [Vec<f64>]) {
        let ld = DMatrix::from_row_slice(self.day_rows.len(), self.k, x);
        let prod = ld * self.r;
        let n = self.n;
        for pos in 0..self.day_rows.len() {
            for j in 0..n {
                out[0][pos * n + j] = prod[(pos, j)];
            }
        }
        if self.has_smooth {
            let len = self.m - 2;
            for p in 0..self.k {
                for t in 0..len {
                    let mut acc = 0.0;
                    for &(o, c) in &D2 {
                        if let Some(pos) = self.row_pos[t + o] {
                            acc += c * x[self.var(pos, p)];
                        }
                    }
                    out[1][p * len + t] = acc;
                }
            }
        }
    }

    fn adjoint(&self, y: &[Vec<f64>], coef: &[f64], out: &mut [f64]) {
        let md = self.day_rows.len();
        let combined = DMatrix::from_row_slice(md, self.n, &y[0]) * coef[0];
        let g = combined * self.r.transpose();
        for pos in 0..md {
            for p in 0..self.k {
                out[self.var(pos, p)] = g[(pos, p)];
            }
        }
        if self.has_smooth {
            let len = self.m - 2;
            for p in 0..self.k {
                for t in 0..len {
                    let v = coef[1] * y[1][p * len + t];
                    for &(o, c) in &D2 {
                        if let Some(pos) = self.row_pos[t + o] {
                            out[self.var(pos, p)] += c * v;
                        }
                    }
                }
            }
        }
    }
}

fn add_dense_block(gram: &mut SymmetricAssembler, blk: &DMatrix<f64>, var: impl Fn(usize) -> usize) {
    for p in 0..blk.nrows() {
        for q in 0..blk.ncols() {
            gram.add(var(p), var(q), blk[(p, q)]);
        }
    }
}

/// Minimize `f1 + f2` over `L` with `R` fixed, subject to `LR ≥ 0`, zero-sum
/// columns `2..k` and zero night rows. `matrix.night_rows` must be set.
pub fn solve_l_step(
    matrix: &PowerMatrix,
    r: &DMatrix<f64>,
    weights: &[f64],
    params: &ObjectiveParams,
    settings: &AdmmSettings,
    l_warm: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, AdmmStats)> {
    let (l, _, stats) = l_step(matrix, r, weights, params, settings, l_warm, None)?;
    Ok((l, stats))
}

fn l_step(
    matrix: &PowerMatrix,
    r: &DMatrix<f64>,
    weights: &[f64],
    params: &ObjectiveParams,
    settings: &AdmmSettings,
    l_warm: &DMatrix<f64>,
    dual: Option<&DualState>,
) -> Result<(DMatrix<f64>, DualState, AdmmStats)> {
    check_finite(r, "R")?;
    check_finite(l_warm, "L warm start")?;
    if matrix.day_rows().is_empty() {
        return Err(ScsfError::Degenerate("every row is classified as night".into()));
    }
    let step = LStep::new(matrix, r, weights);
    let blocks = step.blocks(params);
    let constraints = step.constraints();
    let ordering: Vec<usize> = (0..step.n_vars()).collect();
    let x0 = step.pack(l_warm);
    let sol = admm::solve(&step, &blocks, &constraints, &ordering, &x0, dual, settings)?;
    let mut x = sol.x;
    step.center(&mut x);

    let mut anchors = Vec::new();
    let mut centered = x0.clone();
    step.center(&mut centered);
    let drift = x0.iter().zip(&centered).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if drift <= 1e-12 * x0.iter().map(|v| v.abs()).fold(1.0, f64::max) {
        anchors.push(centered);
    }
    anchors.push(vec![0.0; x.len()]);
    let mut l = step.unpack(&x);
    if !lift_level_l(&mut l, r, &matrix.day_rows()) {
        l = step.unpack(&pull_into_cone(&step, &blocks, x, &anchors));
    }
    Ok((l, sol.dual, sol.stats))
}

/// Smallest per-row raise of the level column of `L` that clears negative
/// entries of `LR`. Needs a positive level row in `R` wherever a violation sits.
fn lift_level_l(l: &mut DMatrix<f64>, r: &DMatrix<f64>, day_rows: &[usize]) -> bool {
    let mut raise = vec![0.0; day_rows.len()];
    for (slot, &i) in day_rows.iter().enumerate() {
        for j in 0..r.ncols() {
            let v = l.row(i).dot(&r.column(j).transpose());
            if v < 0.0 {
                if r[(0, j)] <= 0.0 {
                    return false;
                }
                raise[slot] = f64::max(raise[slot], -v / r[(0, j)]);
            }
        }
    }
    for (slot, &i) in day_rows.iter().enumerate() {
        l[(i, 0)] += raise[slot];
    }
    true
}

/// Smallest Euclidean change to the columns of `R` that makes `L_d R ≥ 0`,
/// found by cyclic projection onto the violated half-spaces. Columns one year
/// apart move their first row together so the coupling with β survives.
/// Leftover violations are tiny and are left to [`lift_level_r`].
fn project_columns(r: &mut DMatrix<f64>, l: &DMatrix<f64>, day_rows: &[usize], coupled: bool) {
    const SWEEPS: usize = 500;
    let n = r.ncols();
    let k = r.nrows();
    let period = if coupled { YEAR } else { n.max(1) };
    let ld = l.select_rows(day_rows);
    let norms: Vec<f64> = ld.row_iter().map(|row| row.norm_squared()).collect();
    let prod = &ld * &*r;
    let scale = prod.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let target = 1e-12 * scale;
    for g in 0..period {
        let cols: Vec<usize> = (g..n).step_by(period).collect();
        if !cols.iter().any(|&j| (0..ld.nrows()).any(|slot| prod[(slot, j)] < 0.0)) {
            continue;
        }
        // every row touching a violated column can become active later
        let candidates: Vec<(usize, usize)> =
            cols.iter().enumerate().flat_map(|(c, _)| (0..ld.nrows()).filter(|&s| norms[s] > 0.0).map(move |s| (c, s))).collect();
        let mut lambda = vec![0.0; candidates.len()];
        let mut delta = DMatrix::<f64>::zeros(k, cols.len());
        let value = |delta: &DMatrix<f64>, c: usize, slot: usize| -> f64 {
            let j = cols[c];
            let mut v = prod[(slot, j)];
            for p in 0..k {
                v += ld[(slot, p)] * delta[(p, c)];
            }
            v
        };
        for _ in 0..SWEEPS {
            let mut worst = 0.0_f64;
            for (idx, &(c, slot)) in candidates.iter().enumerate() {
                let v = value(&delta, c, slot);
                worst = worst.max(-v);
                // step along the constraint normal, never letting the multiplier go negative
                let step = (-(v - target) / norms[slot]).max(-lambda[idx]);
                if step == 0.0 {
                    continue;
                }
                lambda[idx] += step;
                if coupled {
                    // the shared first-row entry moves every column of the group
                    for cc in 0..cols.len() {
                        delta[(0, cc)] += step * ld[(slot, 0)];
                    }
                    for p in 1..k {
                        delta[(p, c)] += step * ld[(slot, p)];
                    }
                } else {
                    for p in 0..k {
                        delta[(p, c)] += step * ld[(slot, p)];
                    }
                }
            }
            if worst <= target {
                break;
            }
        }
        for (c, &j) in cols.iter().enumerate() {
            for p in 0..k {
                r[(p, j)] += delta[(p, c)];
            }
        }
    }
}

/// Per-column counterpart for `R`, raising along the level row where `L`
/// allows it and along `fallback` otherwise. Columns one year apart share
/// their raise so the coupling with β is untouched.
fn lift_level_r(r: &mut DMatrix<f64>, l: &DMatrix<f64>, day_rows: &[usize], coupled: bool, fallback: &DVector<f64>) -> bool {
    let n = r.ncols();
    let period = if coupled { YEAR } else { n.max(1) };
    let ld = l.select_rows(day_rows);
    let prod = &ld * &*r;
    let level: Vec<f64> = ld.column(0).iter().copied().collect();
    let along_fallback = &ld * fallback;
    let mut moves: Vec<Option<(bool, f64)>> = vec![Some((true, 0.0)); period];
    for j in 0..n {
        for slot in 0..ld.nrows() {
            let v = prod[(slot, j)];
            if v >= 0.0 {
                continue;
            }
            let g = j % period;
            let Some((use_level, _)) = moves[g] else { continue };
            if use_level && level[slot] <= 0.0 {
                moves[g] = Some((false, 0.0));
            }
        }
    }
    for j in 0..n {
        let g = j % period;
        for slot in 0..ld.nrows() {
            let v = prod[(slot, j)];
            if v >= 0.0 {
                continue;
            }
            let Some((use_level, amount)) = moves[g] else { continue };
            let rate = if use_level { level[slot] } else { along_fallback[slot] };
            moves[g] = (rate > 0.0).then(|| (use_level, amount.max(-v / rate)));
        }
    }
    if moves.iter().any(|m| m.is_none()) {
        return false;
    }
    for j in 0..n {
        let (use_level, amount) = moves[j % period].expect("checked above");
        if amount == 0.0 {
            continue;
        }
        if use_level {
            r[(0, j)] += amount;
        } else {
            for p in 0..r.nrows() {
                r[(p, j)] += amount * fallback[p];
            }
        }
    }
    true
}

/// Move `x` along the segment toward the first anchor that satisfies every
/// non-negativity block, just far enough to satisfy them as well. Anchors
/// must already satisfy the equality constraints, which the blend preserves.
fn pull_into_cone<M: LinearMaps>(maps: &M, blocks: &[Block], x: Vec<f64>, anchors: &[Vec<f64>]) -> Vec<f64> {
    let nonneg: Vec<usize> = (0..blocks.len()).filter(|&b| blocks[b].penalty.requires_nonneg()).collect();
    let values = |v: &[f64]| {
        let mut out: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.offset.len()]).collect();
        maps.forward(v, &mut out);
        nonneg.iter().flat_map(|&b| out[b].iter().zip(&blocks[b].offset).map(|(a, c)| a + c).collect::<Vec<_>>()).collect::<Vec<f64>>()
    };
    let vx = values(&x);
    let slack = |v: &[f64]| 1e-10 * v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let floor = slack(&vx);
    if vx.iter().all(|&v| v >= -floor) {
        return x;
    }
    for anchor in anchors {
        let va = values(anchor);
        let anchor_floor = slack(&va);
        if va.iter().any(|&v| v < -anchor_floor) {
            continue;
        }
        // blend so every violated entry lands on zero or the anchor's own level
        let t = vx
            .iter()
            .zip(&va)
            .filter(|(v, a)| **v < 0.0 && **a > **v)
            .map(|(v, a)| -v / (a.max(0.0) - v))
            .fold(0.0, f64::max)
            .min(1.0);
        let t = (t * (1.0 + 1e-12)).min(1.0);
        return x.iter().zip(anchor).map(|(xv, av)| (1.0 - t) * xv + t * av).collect();
    }
    x
}

// ---------------------------------------------------------------------------
// R-step

struct RStep {
    k: usize,
    n: usize,
    /// L restricted to day rows
    ld: DMatrix<f64>,
    weight: Vec<f64>,
    target: Vec<f64>,
    /// first-row year-over-year coupling with a shared offset β
    coupled: bool,
    /// (p, j) → core variable
    var_of: Vec<usize>,
    n_core: usize,
    ordering: Vec<usize>,
    has_smooth: bool,
    has_lag: bool,
}

fn fold(phase: usize, period: usize) -> usize {
    if 2 * phase < period {
        2 * phase
    } else {
        2 * (period - 1 - phase) + 1
    }
}

impl RStep {
    fn new(matrix: &PowerMatrix, l: &DMatrix<f64>, weights: &[f64]) -> Self {
        let k = l.ncols();
        let n = matrix.n();
        let day_rows = matrix.day_rows();
        let mut ld = DMatrix::zeros(day_rows.len(), k);
        for (pos, &i) in day_rows.iter().enumerate() {
            ld.set_row(pos, &l.row(i));
        }
        let coupled = n > YEAR;

        // Free entries and their ordering key. With the yearly terms active,
        // days are grouped by phase within the year (folded so that the
        // year boundary stays local) to keep the system banded.
        let mut free: Vec<((usize, usize, usize), usize, usize)> = Vec::new();
        for j in 0..n {
            for p in 0..k {
                if coupled && p == 0 && j >= YEAR {
                    continue;
                }
                let key = if coupled { (fold(j % YEAR, YEAR), j / YEAR, p) } else { (j, 0, p) };
                free.push((key, p, j));
            }
        }
        let n_core = free.len();
        let mut var_of = vec![usize::MAX; k * n];
        for (idx, &(_, p, j)) in free.iter().enumerate() {
            var_of[p * n + j] = idx;
        }
        if coupled {
            for j in YEAR..n {
                var_of[j] = var_of[j % YEAR];
            }
        }
        let mut ordering: Vec<usize> = (0..n_core).collect();
        ordering.sort_by_key(|&v| free[v].0);

        let (weight, target) = loss_terms(matrix, &day_rows, weights);
        RStep {
            k,
            n,
            ld,
            weight,
            target,
            coupled,
            var_of,
            n_core,
            ordering,
            has_smooth: n >= 3,
            has_lag: coupled && k >= 2,
        }
    }

    fn beta_var(&self) -> usize {
        self.n_core
    }

    /// Coefficient of β in entry `(p, j)` of R.
    fn beta_coef(&self, p: usize, j: usize) -> f64 {
        if self.coupled && p == 0 {
            -((j / YEAR) as f64)
        } else {
            0.0
        }
    }

    fn expand(&self, x: &[f64]) -> DMatrix<f64> {
        let beta = if self.coupled { x[self.beta_var()] } else { 0.0 };
        DMatrix::from_fn(self.k, self.n, |p, j| x[self.var_of[p * self.n + j]] + self.beta_coef(p, j) * beta)
    }

    /// Accumulate a full-space gradient `g` (k×n) into variable space.
    fn gather(&self, g: &DMatrix<f64>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..self.k {
            for j in 0..self.n {
                let v = g[(p, j)];
                out[self.var_of[p * self.n + j]] += v;
                if self.coupled && p == 0 {
                    out[self.beta_var()] += self.beta_coef(p, j) * v;
                }
            }
        }
    }

    /// Add `v` at full-space position `((p, j), (q, l))` of a Gram matrix.
    fn add_full(&self, gram: &mut SymmetricAssembler, (p, j): (usize, usize), (q, l): (usize, usize), v: f64) {
        let a = self.var_of[p * self.n + j];
        let b = self.var_of[q * self.n + l];
        gram.add(a, b, v);
        let ca = self.beta_coef(p, j);
        let cb = self.beta_coef(q, l);
        if ca != 0.0 {
            gram.add(self.beta_var(), b, ca * v);
        }
        if cb != 0.0 {
            gram.add(a, self.beta_var(), cb * v);
        }
        if ca != 0.0 && cb != 0.0 {
            gram.add(self.beta_var(), self.beta_var(), ca * cb * v);
        }
    }

    fn n_extra(&self) -> usize {
        usize::from(self.coupled)
    }

    fn blocks(&self, params: &ObjectiveParams) -> Vec<Block> {
        let (k, n) = (self.k, self.n);
        let nx = self.n_extra();
        let mut out = Vec::new();

        let ltl = self.ld.transpose() * &self.ld;
        let mut gram = SymmetricAssembler::new(self.n_core, nx);
        for j in 0..n {
            for p in 0..k {
                for q in 0..k {
                    self.add_full(&mut gram, (p, j), (q, j), ltl[(p, q)]);
                }
            }
        }
        out.push(Block {
            penalty: Penalty::TiltedNonNeg { tau: params.tau, weight: self.weight.clone(), target: self.target.clone() },
            offset: vec![0.0; self.weight.len()],
            gram,
        });

        if self.has_smooth {
            let mut gram = SymmetricAssembler::new(self.n_core, nx);
            for p in 0..k {
                for t in 0..n - 2 {
                    for &(a, ca) in &D2 {
                        for &(b, cb) in &D2 {
                            self.add_full(&mut gram, (p, t + a), (p, t + b), ca * cb);
                        }
                    }
                }
            }
            out.push(Block {
                penalty: Penalty::Norm { scale: params.mu_r },
                offset: vec![0.0; k * (n - 2)],
                gram,
            });
        }

        if self.has_lag {
            let mut gram = SymmetricAssembler::new(self.n_core, nx);
            let taps = [(0usize, -1.0), (YEAR, 1.0)];
            for p in 1..k {
                for t in 0..n - YEAR {
                    for &(a, ca) in &taps {
                        for &(b, cb) in &taps {
                            self.add_full(&mut gram, (p, t + a), (p, t + b), ca * cb);
                        }
                    }
                }
            }
            out.push(Block {
                penalty: Penalty::Norm { scale: params.mu_r },
                offset: vec![0.0; (k - 1) * (n - YEAR)],
                gram,
            });
        }

        if self.coupled {
            let mut gram = SymmetricAssembler::new(self.n_core, nx);
            gram.add(self.beta_var(), self.beta_var(), 1.0);
            out.push(Block { penalty: Penalty::NonNeg, offset: vec![0.0], gram });
        }
        out
    }

    fn pack(&self, r: &DMatrix<f64>, beta: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        for p in 0..self.k {
            for j in 0..self.n {
                if self.coupled && p == 0 && j >= YEAR {
                    continue;
                }
                x[self.var_of[p * self.n + j]] = r[(p, j)];
            }
        }
        if self.coupled {
            x[self.beta_var()] = beta;
        }
        x
    }
}

impl LinearMaps for RStep {
    fn n_vars(&self) -> usize {
        self.n_core + self.n_extra()
    }

    fn forward(&self, x: &[f64], out: &mut [Vec<f64>]) {
        let (k, n) = (self.k, self.n);
        let r = self.expand(x);
        let prod = &self.ld * &r;
        for pos in 0..self.ld.nrows() {
            for j in 0..n {
                out[0][pos * n + j] = prod[(pos, j)];
            }
        }
        let mut b = 1;
        if self.has_smooth {
            let len = n - 2;
            for p in 0..k {
                for t in 0..len {
                    out[b][p * len + t] = r[(p, t)] - 2.0 * r[(p, t + 1)] + r[(p, t + 2)];
                }
            }
            b += 1;
        }
        if self.has_lag {
            let len = n - YEAR;
            for p in 1..k {
                for t in 0..len {
                    out[b][(p - 1) * len + t] = r[(p, t + YEAR)] - r[(p, t)];
                }
            }
            b += 1;
        }
        if self.coupled {
            out[b][0] = x[self.beta_var()];
        }
    }

    fn adjoint(&self, y: &[Vec<f64>], coef: &[f64], out: &mut [f64]) {
        let (k, n) = (self.k, self.n);
        let md = self.ld.nrows();
        let resid = DMatrix::from_row_slice(md, n, &y[0]) * coef[0];
        let mut g = self.ld.transpose() * resid;
        let mut b = 1;
        if self.has_smooth {
            let len = n - 2;
            for p in 0..k {
                for t in 0..len {
                    let v = coef[b] * y[b][p * len + t];
                    g[(p, t)] += v;
                    g[(p, t + 1)] -= 2.0 * v;
                    g[(p, t + 2)] += v;
                }
            }
            b += 1;
        }
        if self.has_lag {
            let len = n - YEAR;
            for p in 1..k {
                for t in 0..len {
                    let v = coef[b] * y[b][(p - 1) * len + t];
                    g[(p, t + YEAR)] += v;
                    g[(p, t)] -= v;
                }
            }
            b += 1;
        }
        self.gather(&g, out);
        if self.coupled {
            out[self.beta_var()] += coef[b] * y[b][0];
        }
    }
}

/// Minimize `f1 + f3 + f4` over `R` (and `β` for records longer than a year)
/// with `L` fixed, subject to `LR ≥ 0` and `R₁,ⱼ = R₁,ⱼ₊₃₆₅ + β`, `β ≥ 0`.
/// The returned `R` satisfies the coupling exactly by construction.
pub fn solve_r_step(
    matrix: &PowerMatrix,
    l: &DMatrix<f64>,
    weights: &[f64],
    params: &ObjectiveParams,
    settings: &AdmmSettings,
    r_warm: &DMatrix<f64>,
    beta_warm: Option<f64>,
) -> Result<(DMatrix<f64>, Option<f64>, AdmmStats)> {
    let (r, beta, _, stats) = r_step(matrix, l, weights, params, settings, r_warm, beta_warm, None)?;
    Ok((r, beta, stats))
}

#[allow(clippy::too_many_arguments)]
fn r_step(
    matrix: &PowerMatrix,
    l: &DMatrix<f64>,
    weights: &[f64],
    params: &ObjectiveParams,
    settings: &AdmmSettings,
    r_warm: &DMatrix<f64>,
    beta_warm: Option<f64>,
    dual: Option<&DualState>,
) -> Result<(DMatrix<f64>, Option<f64>, DualState, AdmmStats)> {
    check_finite(l, "L")?;
    check_finite(r_warm, "R warm start")?;
    let step = RStep::new(matrix, l, weights);
    let blocks = step.blocks(params);
    // The warm start is only used where it honours the coupling.
    let x0 = step.pack(r_warm, beta_warm.unwrap_or(0.0).max(0.0));
    let mut sol = admm::solve(&step, &blocks, &[], &step.ordering, &x0, dual, settings)?;
    if step.coupled {
        let b = step.beta_var();
        sol.x[b] = sol.x[b].max(0.0);
    }
    let beta = step.coupled.then(|| sol.x[step.beta_var()]);
    let mut r = step.expand(&sol.x);
    project_columns(&mut r, l, &matrix.day_rows(), step.coupled);
    let mean_column = r_warm.column_mean();
    if !lift_level_r(&mut r, l, &matrix.day_rows(), step.coupled, &mean_column) {
        let x = pull_into_cone(&step, &blocks, sol.x, &[x0, vec![0.0; step.n_vars()]]);
        r = step.expand(&x);
        return Ok((r, step.coupled.then(|| x[step.beta_var()].max(0.0)), sol.dual, sol.stats));
    }
    Ok((r, beta, sol.dual, sol.stats))
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ScsfError::Numeric(format!("{what} has non-finite entries")))
    }
}

// ---------------------------------------------------------------------------
// outer loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubproblemRecord {
    pub iteration: usize,
    pub step: Step,
    pub stats: AdmmStats,
    /// false when the step was rejected for increasing the objective
    pub accepted: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective after each outer iteration.
    pub objective_trace: Vec<ObjectiveParts>,
    pub iterations: usize,
    pub converged: bool,
    pub beta: Option<f64>,
    pub degradation_rate: Option<f64>,
    pub subproblem_stats: Vec<SubproblemRecord>,
    pub weights_used: DayWeights,
    pub mu_l: f64,
    pub mu_r: f64,
    pub epsilon: f64,
    pub night_rows: Vec<usize>,
    pub top_singular_value: f64,
    /// True when the energy ramp had to be relaxed to find enough usable days.
    pub relaxed_weights: bool,
}

impl FitReport {
    pub fn final_objective(&self) -> Option<&ObjectiveParts> {
        self.objective_trace.last()
    }

    pub fn relative_changes(&self) -> Vec<f64> {
        self.objective_trace
            .windows(2)
            .map(|w| (w[0].total - w[1].total).abs() / w[0].total.abs().max(f64::MIN_POSITIVE))
            .collect()
    }
}

/// Weights with the one-time relaxation of the energy floor.
pub fn fit_weights(matrix: &PowerMatrix, config: &FitConfig) -> Result<(DayWeights, bool)> {
    let weights = compute_weights(matrix, &config.weights)?;
    if weights.count_above(USABLE_WEIGHT) >= MIN_USABLE_DAYS {
        return Ok((weights, false));
    }
    let mut relaxed = config.weights;
    relaxed.energy_ramp.0 = relaxed.energy_ramp.0.min(RELAXED_ENERGY_FLOOR);
    let weights = compute_weights(matrix, &relaxed)?;
    if weights.count_above(USABLE_WEIGHT) >= MIN_USABLE_DAYS {
        Ok((weights, true))
    } else {
        Err(ScsfError::Degenerate(format!(
            "only {} days look clear enough to fit (need {MIN_USABLE_DAYS})",
            weights.count_above(USABLE_WEIGHT)
        )))
    }
}

/// Fit with weights computed from the data.
pub fn fit(matrix: &PowerMatrix, config: &FitConfig) -> Result<(LowRankModel, FitReport)> {
    fit_inner(matrix, config, None)
}

/// Fit with caller-supplied day weights (e.g. zero on held-out days).
pub fn fit_with_weights(matrix: &PowerMatrix, config: &FitConfig, weights: DayWeights) -> Result<(LowRankModel, FitReport)> {
    fit_inner(matrix, config, Some(weights))
}

fn fit_inner(matrix: &PowerMatrix, config: &FitConfig, weights: Option<DayWeights>) -> Result<(LowRankModel, FitReport)> {
    config.validate()?;
    let (m, n) = (matrix.m(), matrix.n());
    if m == 0 || n == 0 {
        return Err(ScsfError::Degenerate("empty data matrix".into()));
    }
    if matrix.max_observed() <= 0.0 {
        return Err(ScsfError::Degenerate("data matrix has no positive observations".into()));
    }
    if config.k > m.min(n) {
        return Err(ScsfError::Config(format!("rank {} exceeds min(m, n) = {}", config.k, m.min(n))));
    }
    let epsilon = config.night_epsilon(matrix);
    let matrix = matrix.clone().with_night_rows(epsilon);
    if matrix.night_rows.len() == m {
        return Err(ScsfError::Degenerate("every row falls below the night threshold".into()));
    }

    let (l0, r0, sigma) = svd_init(&matrix.data, config.k)?;
    let (weights, relaxed_weights) = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(ScsfError::Size(format!("{} weights for {n} days", w.len())));
            }
            (w, false)
        }
        None => fit_weights(&matrix, config)?,
    };
    let (mu_l, mu_r) = config.resolve_mu(sigma[0], m, n);
    let params = ObjectiveParams { tau: config.tau, mu_l, mu_r };
    let settings = settings_from(config);
    let w = &weights.values;

    let mut l = l0;
    let mut r = r0;
    let mut beta: Option<f64> = (n > YEAR).then_some(0.0);
    let mut trace: Vec<ObjectiveParts> = Vec::new();
    let mut records = Vec::new();
    let mut converged = false;
    let mut current: Option<f64> = None;
    let mut l_dual: Option<DualState> = None;
    let mut r_dual: Option<DualState> = None;

    for it in 1..=config.max_iter {
        let (l_new, dual, stats) = l_step(&matrix, &r, w, &params, &settings, &l, l_dual.as_ref())?;
        l_dual = Some(dual);
        let obj = objective(&matrix, &l_new, &r, w, &params)?.total;
        // The first sweep starts from the unconstrained SVD factors, so it is
        // always taken.
        let accepted = current.is_none_or(|c| obj <= c);
        if accepted {
            l = l_new;
            current = current.map(|_| obj);
        }
        records.push(SubproblemRecord { iteration: it, step: Step::L, stats, accepted, objective: obj });

        let (r_new, beta_new, dual, stats) = r_step(&matrix, &l, w, &params, &settings, &r, beta, r_dual.as_ref())?;
        r_dual = Some(dual);
        let obj = objective(&matrix, &l, &r_new, w, &params)?.total;
        let accepted = current.is_none_or(|c| obj <= c);
        if accepted {
            r = r_new;
            beta = beta_new;
            current = Some(obj);
        }
        records.push(SubproblemRecord { iteration: it, step: Step::R, stats, accepted, objective: obj });

        let parts = objective(&matrix, &l, &r, w, &params)?;
        let prev = trace.last().map(|p: &ObjectiveParts| p.total);
        trace.push(parts);
        if let Some(prev) = prev {
            let change = (prev - parts.total).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if change < config.rel_tol || parts.total == 0.0 {
                converged = true;
                break;
            }
        }
    }

    let model = LowRankModel {
        l,
        r,
        beta,
        night_rows: matrix.night_rows.clone(),
        objective: params,
        config: config.clone(),
    };
    let report = FitReport {
        iterations: trace.len(),
        objective_trace: trace,
        converged,
        beta,
        degradation_rate: model.degradation_rate(),
        subproblem_stats: records,
        weights_used: weights,
        mu_l,
        mu_r,
        epsilon,
        night_rows: matrix.night_rows.clone(),
        top_singular_value: sigma[0],
        relaxed_weights,
    };
    Ok((model, report))
}

/// `(D, L, R)` helper used by tests and diagnostics: returns the objective
/// of a model on the data it was fitted to.
pub fn model_objective(matrix: &PowerMatrix, model: &LowRankModel, weights: &[f64]) -> Result<ObjectiveParts> {
    objective(matrix, &model.l, &model.r, weights, &model.objective)
}
