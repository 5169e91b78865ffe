#![allow(dead_code)]

//! Shared test helpers: interior-point reference solutions of the two convex
//! subproblems (no year coupling) and small instance builders.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, ZeroConeT,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsf_core::model::{objective, ObjectiveParams};
use scsf_core::PowerMatrix;

fn second_diff(x: &[f64]) -> Vec<f64> {
    x.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
}

fn misfit(matrix: &PowerMatrix, fit: &DMatrix<f64>, w: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..matrix.n() {
        for i in 0..matrix.m() {
            if matrix.observed[(i, j)] && w[j] > 0.0 {
                let x = w[j] * (matrix.data[(i, j)] - fit[(i, j)]);
                acc += 0.5 * x.abs() + (tau - 0.5) * x;
            }
        }
    }
    acc
}

fn smoothness(lines: impl Iterator<Item = Vec<f64>>) -> f64 {
    lines.map(|v| second_diff(&v).iter().map(|d| d * d).sum::<f64>()).sum::<f64>().sqrt()
}

/// `f1 + f2` evaluated from scratch.
pub fn l_objective(matrix: &PowerMatrix, l: &DMatrix<f64>, r: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams) -> f64 {
    let f2 = if l.nrows() >= 3 { smoothness(l.column_iter().map(|c| c.iter().copied().collect())) } else { 0.0 };
    misfit(matrix, &(l * r), w, p.tau) + p.mu_l * f2
}

/// `f1 + f3` evaluated from scratch (records of at most one year).
pub fn r_objective(matrix: &PowerMatrix, l: &DMatrix<f64>, r: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams) -> f64 {
    let f3 = if r.ncols() >= 3 { smoothness(r.row_iter().map(|c| c.iter().copied().collect())) } else { 0.0 };
    misfit(matrix, &(l * r), w, p.tau) + p.mu_r * f3
}

/// The library's own objective, for cross-checking the one above.
pub fn library_objective(matrix: &PowerMatrix, l: &DMatrix<f64>, r: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams) -> f64 {
    objective(matrix, l, r, w, p).unwrap().total
}

/// Conic program `min cᵀx` s.t. `Ax + s = b`, with the rows of `A` grouped
/// into an equality block, a nonnegative block and one second-order cone.
struct Conic {
    cost: Vec<f64>,
    eq: Vec<(BTreeMap<usize, f64>, f64)>,
    nonneg: Vec<BTreeMap<usize, f64>>,
    soc: Vec<BTreeMap<usize, f64>>,
}

impl Conic {
    fn new(vars: usize) -> Self {
        Conic { cost: vec![0.0; vars], eq: Vec::new(), nonneg: Vec::new(), soc: Vec::new() }
    }

    fn var(&mut self, cost: f64) -> usize {
        self.cost.push(cost);
        self.cost.len() - 1
    }

    /// Adds the tilted-ℓ1 data term: for every kept entry, `w·(d − fit)`
    /// is split into positive and negative parts.
    fn misfit(&mut self, matrix: &PowerMatrix, w: &[f64], tau: f64, fit: impl Fn(usize, usize) -> BTreeMap<usize, f64>) {
        for j in 0..matrix.n() {
            for i in 0..matrix.m() {
                if !(matrix.observed[(i, j)] && w[j] > 0.0) {
                    continue;
                }
                let up = self.var(tau);
                let down = self.var(1.0 - tau);
                let mut row: BTreeMap<usize, f64> = fit(i, j).into_iter().map(|(v, c)| (v, w[j] * c)).collect();
                row.insert(up, 1.0);
                row.insert(down, -1.0);
                self.eq.push((row, w[j] * matrix.data[(i, j)]));
                self.nonneg.push(BTreeMap::from([(up, -1.0)]));
                self.nonneg.push(BTreeMap::from([(down, -1.0)]));
            }
        }
    }

    /// Adds `weight · ‖(second differences of each line)‖₂` through an
    /// epigraph variable.
    fn smoothness(&mut self, lines: &[Vec<usize>], weight: f64) {
        if lines.iter().all(|line| line.len() < 3) {
            return;
        }
        let t = self.var(weight);
        self.soc.push(BTreeMap::from([(t, -1.0)]));
        for line in lines {
            for win in line.windows(3) {
                self.soc.push(BTreeMap::from([(win[0], -1.0), (win[1], 2.0), (win[2], -1.0)]));
            }
        }
    }

    fn solve(self, unknowns: usize) -> Vec<f64> {
        let vars = self.cost.len();
        let (mut rows, mut cols, mut vals, mut rhs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut push = |row: &BTreeMap<usize, f64>, b: f64| {
            let r = rhs.len();
            for (&c, &v) in row {
                rows.push(r);
                cols.push(c);
                vals.push(v);
            }
            rhs.push(b);
        };
        for (row, b) in &self.eq {
            push(row, *b);
        }
        for row in &self.nonneg {
            push(row, 0.0);
        }
        for row in &self.soc {
            push(row, 0.0);
        }
        let mut cones = vec![ZeroConeT(self.eq.len()), NonnegativeConeT(self.nonneg.len())];
        if !self.soc.is_empty() {
            cones.push(SecondOrderConeT(self.soc.len()));
        }
        let a = CscMatrix::new_from_triplets(rhs.len(), vars, rows, cols, vals);
        let p = CscMatrix::zeros((vars, vars));
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(500)
            .tol_gap_abs(1e-12)
            .tol_gap_rel(1e-12)
            .tol_feas(1e-12)
            .build()
            .unwrap();
        let mut solver = DefaultSolver::new(&p, &self.cost, &a, &rhs, &cones, settings).unwrap();
        solver.solve();
        assert!(
            matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved),
            "reference solve failed: {:?}",
            solver.solution.status
        );
        solver.solution.x[..unknowns].to_vec()
    }
}

/// Reference minimizer of `f1 + f2` over `L` with `R` fixed, subject to
/// `LR ≥ 0`, zero column sums beyond the first and zero night rows.
pub fn l_step_oracle(matrix: &PowerMatrix, r: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams) -> (DMatrix<f64>, f64) {
    let (m, n, k) = (matrix.m(), matrix.n(), r.nrows());
    let idx = |i: usize, c: usize| i * k + c;
    let mut prog = Conic::new(m * k);
    let fit = |i: usize, j: usize| (0..k).map(|c| (idx(i, c), r[(c, j)])).collect::<BTreeMap<_, _>>();
    prog.misfit(matrix, w, p.tau, fit);
    let day = matrix.day_rows();
    for i in 0..m {
        if day.contains(&i) {
            for j in 0..n {
                prog.nonneg.push(fit(i, j).into_iter().map(|(v, c)| (v, -c)).collect());
            }
        } else {
            for c in 0..k {
                prog.eq.push((BTreeMap::from([(idx(i, c), 1.0)]), 0.0));
            }
        }
    }
    for c in 1..k {
        prog.eq.push(((0..m).map(|i| (idx(i, c), 1.0)).collect(), 0.0));
    }
    let lines: Vec<Vec<usize>> = (0..k).map(|c| (0..m).map(|i| idx(i, c)).collect()).collect();
    prog.smoothness(&lines, p.mu_l);
    let x = prog.solve(m * k);
    let l = DMatrix::from_fn(m, k, |i, c| x[idx(i, c)]);
    let f = l_objective(matrix, &l, r, w, p);
    (l, f)
}

/// Reference minimizer of `f1 + f3` over `R` with `L` fixed (records of at
/// most one year), subject to `LR ≥ 0`.
pub fn r_step_oracle(matrix: &PowerMatrix, l: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams) -> (DMatrix<f64>, f64) {
    let (n, k) = (matrix.n(), l.ncols());
    assert!(n <= 365);
    let idx = |c: usize, j: usize| j * k + c;
    let mut prog = Conic::new(k * n);
    let fit = |i: usize, j: usize| (0..k).map(|c| (idx(c, j), l[(i, c)])).collect::<BTreeMap<_, _>>();
    prog.misfit(matrix, w, p.tau, fit);
    for i in matrix.day_rows() {
        for j in 0..n {
            prog.nonneg.push(fit(i, j).into_iter().map(|(v, c)| (v, -c)).collect());
        }
    }
    let lines: Vec<Vec<usize>> = (0..k).map(|c| (0..n).map(|j| idx(c, j)).collect()).collect();
    prog.smoothness(&lines, p.mu_r);
    let x = prog.solve(k * n);
    let r = DMatrix::from_fn(k, n, |c, j| x[idx(c, j)]);
    let f = r_objective(matrix, l, &r, w, p);
    (r, f)
}

fn tilted_slope(x: f64, tau: f64) -> f64 {
    if x > 0.0 {
        tau
    } else if x < 0.0 {
        tau - 1.0
    } else {
        0.0
    }
}

/// Subgradient of `‖second differences of v‖₂`.
fn smoothness_slope(v: &[f64]) -> Vec<f64> {
    let d = second_diff(v);
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = vec![0.0; v.len()];
    if norm > 0.0 {
        for (t, x) in d.iter().enumerate() {
            out[t] += x / norm;
            out[t + 1] -= 2.0 * x / norm;
            out[t + 2] += x / norm;
        }
    }
    out
}

/// Projection onto `{x : a·x ≥ 0 for every a}` in one dimension.
fn half_line(normals: impl Iterator<Item = f64>) -> impl Fn(f64) -> f64 {
    let (mut pos, mut neg) = (false, false);
    for a in normals {
        pos |= a > 0.0;
        neg |= a < 0.0;
    }
    move |x| match (pos, neg) {
        (true, true) => 0.0,
        (true, false) => x.max(0.0),
        (false, true) => x.min(0.0),
        (false, false) => x,
    }
}

/// Staged projected subgradient: normalized steps `s/√t`, restarting from the
/// best point with a tenfold smaller `s` at each stage.
fn staged(x0: Vec<f64>, iters: usize, f: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, project: impl Fn(&mut [f64])) -> (Vec<f64>, f64) {
    let mut best = x0;
    project(&mut best);
    let mut best_f = f(&best);
    let mut s = 0.2 * best.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let stages = 5;
    for _ in 0..stages {
        let mut x = best.clone();
        for t in 0..iters / stages {
            let g = grad(&x);
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 {
                break;
            }
            let step = s / (gn * ((t + 1) as f64).sqrt());
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= step * gi;
            }
            project(&mut x);
            let fx = f(&x);
            if fx < best_f {
                best_f = fx;
                best.clone_from(&x);
            }
        }
        s *= 0.1;
    }
    (best, best_f)
}

/// Rank-one L-step by projected subgradient. The zero-sum constraint only
/// touches columns beyond the first, so for `k = 1` the feasible set is a
/// product of half-lines with the night rows pinned at zero.
pub fn l_step_subgradient(matrix: &PowerMatrix, r: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams, l0: &DMatrix<f64>, iters: usize) -> f64 {
    assert_eq!(r.nrows(), 1);
    let m = matrix.m();
    let day = matrix.day_rows();
    let clamp = half_line(r.iter().copied());
    let project = |x: &mut [f64]| {
        for (i, v) in x.iter_mut().enumerate() {
            *v = if day.contains(&i) { clamp(*v) } else { 0.0 };
        }
    };
    let as_l = |x: &[f64]| DMatrix::from_column_slice(m, 1, x);
    let f = |x: &[f64]| l_objective(matrix, &as_l(x), r, w, p);
    let grad = |x: &[f64]| {
        let l = as_l(x);
        let slopes = misfit_slopes(matrix, &(&l * r), w, p.tau) * r.transpose();
        let smooth = smoothness_slope(x);
        (0..m).map(|i| slopes[(i, 0)] + p.mu_l * smooth[i]).collect()
    };
    staged(l0.iter().copied().collect(), iters, f, grad, project).1
}

/// Rank-one R-step by projected subgradient (records of at most one year).
pub fn r_step_subgradient(matrix: &PowerMatrix, l: &DMatrix<f64>, w: &[f64], p: &ObjectiveParams, r0: &DMatrix<f64>, iters: usize) -> f64 {
    assert_eq!(l.ncols(), 1);
    let n = matrix.n();
    assert!(n <= 365);
    let clamp = half_line(matrix.day_rows().into_iter().map(|i| l[(i, 0)]));
    let project = |x: &mut [f64]| x.iter_mut().for_each(|v| *v = clamp(*v));
    let as_r = |x: &[f64]| DMatrix::from_row_slice(1, n, x);
    let f = |x: &[f64]| r_objective(matrix, l, &as_r(x), w, p);
    let grad = |x: &[f64]| {
        let slopes = l.transpose() * misfit_slopes(matrix, &(l * as_r(x)), w, p.tau);
        let smooth = smoothness_slope(x);
        (0..n).map(|j| slopes[(0, j)] + p.mu_r * smooth[j]).collect()
    };
    staged(r0.iter().copied().collect(), iters, f, grad, project).1
}

/// Subgradient of the data term with respect to the fitted matrix.
fn misfit_slopes(matrix: &PowerMatrix, fit: &DMatrix<f64>, w: &[f64], tau: f64) -> DMatrix<f64> {
    DMatrix::from_fn(matrix.m(), matrix.n(), |i, j| {
        if matrix.observed[(i, j)] && w[j] > 0.0 {
            -w[j] * tilted_slope(matrix.data[(i, j)] - fit[(i, j)], tau)
        } else {
            0.0
        }
    })
}

/// A small random instance: nonnegative low-rank data with a dark first row,
/// a few missing entries, random day weights and a rank-`k` SVD start.
pub struct Toy {
    pub matrix: PowerMatrix,
    pub weights: Vec<f64>,
    pub params: ObjectiveParams,
    pub l0: DMatrix<f64>,
    pub r0: DMatrix<f64>,
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(4..=6);
    let n = rng.random_range(4..=8);
    let k = rng.random_range(1..=2);
    toy_shaped(&mut rng, m, n, k)
}

/// Like [`toy`] with the shape fixed by the caller.
pub fn toy_with(seed: u64, m: usize, n: usize, k: usize) -> Toy {
    toy_shaped(&mut ChaCha8Rng::seed_from_u64(seed), m, n, k)
}

fn toy_shaped(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> Toy {
    // two comparable nonnegative components so a rank-2 fit is well posed
    let profile: Vec<f64> = (0..m).map(|i| if i == 0 { 0.0 } else { rng.random_range(0.2..1.0) }).collect();
    let second: Vec<f64> = (0..m).map(|i| if i == 0 { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
    let level: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let swing: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut data = DMatrix::from_fn(m, n, |i, j| profile[i] * level[j] + second[i] * swing[j]);
    let mut observed = DMatrix::from_element(m, n, true);
    for i in 1..m {
        for j in 0..n {
            if rng.random_bool(0.3) {
                data[(i, j)] *= rng.random_range(0.0..1.1);
            }
            if rng.random_bool(0.05) {
                observed[(i, j)] = false;
            }
        }
    }
    let matrix = PowerMatrix::from_parts(data, observed).with_night_rows(0.0);
    let weights: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.3..1.0) }).collect();
    let params = ObjectiveParams {
        tau: rng.random_range(0.6..0.95),
        mu_l: rng.random_range(0.05..1.0),
        mu_r: rng.random_range(0.05..1.0),
    };
    let (l0, r0, _) = scsf_core::model::svd_init(&matrix.data, k).unwrap();
    Toy { matrix, weights, params, l0, r0 }
}
