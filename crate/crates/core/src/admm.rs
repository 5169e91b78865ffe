//! Over-relaxed, scaled-form ADMM for problems of the form
//!
//! ```text
//! minimize   Σ_b g_b(A_b x + c_b)
//! subject to C x = 0
//! ```
//!
//! where each `g_b` has a cheap proximal map. The x-update is a linear solve
//! with `Σ_b ρ_b A_bᵀA_b`, factored once and reused until ρ is rebalanced.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScsfError};
use crate::linalg::{BorderedFactor, SymmetricAssembler};
use crate::operators::{prox_norm_in_place, prox_tilted_l1_scalar};

const RELAXATION: f64 = 1.6;
const CHECK_EVERY: usize = 5;
const ADAPT_EVERY: usize = 50;
const ADAPT_RATIO: f64 = 5.0;
const MAX_REFACTOR: usize = 40;
/// Each ρ_b stays within this factor of its equilibrated starting value.
const RHO_RANGE: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum Penalty {
    /// `φ_τ` summed over the block
    Tilted { tau: f64 },
    /// `Σ_i weight_i · φ_τ(target_i − v_i)` restricted to `v ≥ 0`
    TiltedNonNeg { tau: f64, weight: Vec<f64>, target: Vec<f64> },
    /// `scale · ‖·‖₂` of the whole block
    Norm { scale: f64 },
    /// indicator of the non-negative orthant
    NonNeg,
}

impl Penalty {
    fn prox_in_place(&self, v: &mut [f64], rho: f64) {
        match self {
            Penalty::Tilted { tau } => v.iter_mut().for_each(|x| *x = prox_tilted_l1_scalar(*x, *tau, 1.0 / rho)),
            Penalty::TiltedNonNeg { tau, weight, target } => {
                // one-dimensional pieces: prox of the loss, then clip
                for ((x, w), t) in v.iter_mut().zip(weight).zip(target) {
                    let y = prox_tilted_l1_scalar(t - *x, *tau, w / rho);
                    *x = (t - y).max(0.0);
                }
            }
            Penalty::Norm { scale } => prox_norm_in_place(v, scale / rho),
            Penalty::NonNeg => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    /// Whether the penalty is infinite on negative entries.
    pub fn requires_nonneg(&self) -> bool {
        matches!(self, Penalty::TiltedNonNeg { .. } | Penalty::NonNeg)
    }
}

/// One term `g_b(A_b x + c_b)`.
#[derive(Debug, Clone)]
pub struct Block {
    pub penalty: Penalty,
    pub offset: Vec<f64>,
    /// `A_bᵀ A_b` in variable space.
    pub gram: SymmetricAssembler,
}

/// Matrix-free access to the stacked operators `A_b`.
pub trait LinearMaps {
    fn n_vars(&self) -> usize;
    /// `out[b] = A_b x` (offsets excluded).
    fn forward(&self, x: &[f64], out: &mut [Vec<f64>]);
    /// `out = Σ_b coef[b] · A_bᵀ y[b]` (overwrites `out`).
    fn adjoint(&self, y: &[Vec<f64>], coef: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdmmStats {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub primal_scale: f64,
    pub dual_scale: f64,
    pub converged: bool,
    pub refactorizations: usize,
}

/// Dual state carried between related solves: the unscaled multipliers
/// `y_b = ρ_b u_b` and the ρ multipliers relative to equilibration.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub y: Vec<Vec<f64>>,
    pub rho_factor: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub dual: DualState,
    pub stats: AdmmStats,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

struct Factored {
    factor: BorderedFactor,
    sigma: f64,
}

fn factor_system(
    blocks: &[Block],
    rho: &[f64],
    ordering: &[usize],
    constraints: &[Vec<(usize, f64)>],
) -> Result<Factored> {
    let parts: Vec<(&SymmetricAssembler, f64)> = blocks.iter().zip(rho).map(|(b, &r)| (&b.gram, r)).collect();
    let mut system = SymmetricAssembler::combine(&parts);
    let n = system.dim();
    let sigma = 1e-9 * (system.diagonal_sum() / n as f64).max(f64::MIN_POSITIVE);
    system.add_identity(sigma);
    let factor = BorderedFactor::new(&system, ordering, constraints)?;
    Ok(Factored { factor, sigma })
}

/// `A_b S` for a diagonal variable scaling `S`.
struct ScaledMaps<'a, M> {
    inner: &'a M,
    s: Vec<f64>,
    buf: std::cell::RefCell<Vec<f64>>,
}

impl<M: LinearMaps> LinearMaps for ScaledMaps<'_, M> {
    fn n_vars(&self) -> usize {
        self.s.len()
    }

    fn forward(&self, x: &[f64], out: &mut [Vec<f64>]) {
        let mut buf = self.buf.borrow_mut();
        for ((b, xv), sv) in buf.iter_mut().zip(x).zip(&self.s) {
            *b = xv * sv;
        }
        self.inner.forward(&buf, out);
    }

    fn adjoint(&self, y: &[Vec<f64>], coef: &[f64], out: &mut [f64]) {
        self.inner.adjoint(y, coef, out);
        out.iter_mut().zip(&self.s).for_each(|(o, sv)| *o *= sv);
    }
}

/// Run ADMM from `x0`, optionally warm-starting the multipliers. The
/// returned x-iterate satisfies the equality constraints to solver precision.
pub fn solve<M: LinearMaps>(
    maps: &M,
    blocks: &[Block],
    constraints: &[Vec<(usize, f64)>],
    ordering: &[usize],
    x0: &[f64],
    dual0: Option<&DualState>,
    settings: &AdmmSettings,
) -> Result<Solution> {
    let n = maps.n_vars();
    assert_eq!(x0.len(), n);
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(ScsfError::Numeric("non-finite warm start".into()));
    }

    // Jacobi scaling of the variables: factors of very different magnitude
    // otherwise leave the splitting badly conditioned.
    let mut diag = vec![0.0; n];
    for b in blocks {
        let tr = b.gram.diagonal_sum();
        if tr > 0.0 {
            for (d, g) in diag.iter_mut().zip(b.gram.diagonal()) {
                *d += g * n as f64 / tr;
            }
        }
    }
    let s: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }).collect();
    let scaled_blocks: Vec<Block> = blocks
        .iter()
        .map(|b| {
            let mut gram = b.gram.clone();
            gram.scale_symmetric(&s);
            Block { penalty: b.penalty.clone(), offset: b.offset.clone(), gram }
        })
        .collect();
    let scaled_constraints: Vec<Vec<(usize, f64)>> =
        constraints.iter().map(|row| row.iter().map(|&(v, c)| (v, c * s[v])).collect()).collect();
    let scaled_maps = ScaledMaps { inner: maps, s: s.clone(), buf: std::cell::RefCell::new(vec![0.0; n]) };
    let y0: Vec<f64> = x0.iter().zip(&s).map(|(x, sv)| x / sv).collect();
    if let Some(d) = dual0 {
        let shapes_match = d.y.len() == blocks.len()
            && d.rho_factor.len() == blocks.len()
            && d.y.iter().zip(blocks).all(|(y, b)| y.len() == b.offset.len());
        if !shapes_match {
            return Err(ScsfError::Size("dual warm start does not match the blocks".into()));
        }
    }
    let mut sol = solve_scaled(&scaled_maps, &scaled_blocks, &scaled_constraints, ordering, &y0, dual0, settings)?;
    sol.x.iter_mut().zip(&s).for_each(|(v, sv)| *v *= sv);
    Ok(sol)
}

/// Iterate state `(z, u)` together with the x-iterate that produced it.
#[derive(Clone)]
struct State {
    z: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl State {
    /// Flatten with `√ρ_b` weights so Euclidean distances are the natural
    /// metric of the iteration.
    fn flatten(&self, rho: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (b, r) in rho.iter().enumerate() {
            let w = r.sqrt();
            out.extend(self.z[b].iter().map(|v| v * w));
            out.extend(self.u[b].iter().map(|v| v * w));
        }
    }

    fn unflatten(&mut self, rho: &[f64], v: &[f64]) {
        let mut at = 0;
        for (b, r) in rho.iter().enumerate() {
            let w = 1.0 / r.sqrt();
            for t in self.z[b].iter_mut() {
                *t = v[at] * w;
                at += 1;
            }
            for t in self.u[b].iter_mut() {
                *t = v[at] * w;
                at += 1;
            }
        }
    }
}

struct Engine<'a, M> {
    maps: &'a M,
    blocks: &'a [Block],
    rho: Vec<f64>,
    fac: Factored,
    work: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl<M: LinearMaps> Engine<'_, M> {
    /// One over-relaxed ADMM sweep from `w`. Returns the new state, the
    /// x-iterate and `A x`.
    fn step(&mut self, w: &State, x_prev: &[f64], ax: &mut [Vec<f64>]) -> Result<(State, Vec<f64>)> {
        let nb = self.blocks.len();
        for b in 0..nb {
            for ((o, (zb, ub)), c) in self.work[b].iter_mut().zip(w.z[b].iter().zip(&w.u[b])).zip(&self.blocks[b].offset) {
                *o = zb - ub - c;
            }
        }
        self.maps.adjoint(&self.work, &self.rho, &mut self.rhs);
        for (r, xv) in self.rhs.iter_mut().zip(x_prev) {
            *r += self.fac.sigma * xv;
        }
        let x = self.fac.factor.solve(&self.rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ScsfError::Numeric("splitting solver diverged".into()));
        }
        self.maps.forward(&x, ax);
        let mut next = w.clone();
        for b in 0..nb {
            let block = &self.blocks[b];
            let zb = &mut next.z[b];
            for (idx, v) in zb.iter_mut().enumerate() {
                let axc = ax[b][idx] + block.offset[idx];
                *v = RELAXATION * axc + (1.0 - RELAXATION) * w.z[b][idx] + w.u[b][idx];
            }
            block.penalty.prox_in_place(zb, self.rho[b]);
            for (idx, ub) in next.u[b].iter_mut().enumerate() {
                let axc = ax[b][idx] + block.offset[idx];
                let relaxed = RELAXATION * axc + (1.0 - RELAXATION) * w.z[b][idx];
                *ub = w.u[b][idx] + relaxed - next.z[b][idx];
            }
        }
        Ok((next, x))
    }
}

/// Type-II Anderson acceleration over the last few fixed-point residuals.
struct Anderson {
    memory: usize,
    /// Δw + Δg for each stored pair
    step: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
    /// Gram matrix of `dg`, kept in step with it
    gram: Vec<Vec<f64>>,
    last: Option<(Vec<f64>, Vec<f64>)>,
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Anderson { memory, step: Vec::new(), dg: Vec::new(), gram: Vec::new(), last: None }
    }

    /// Drop the history but keep the latest point as a new base.
    fn forget(&mut self) {
        self.step.clear();
        self.dg.clear();
        self.gram.clear();
    }

    fn reset(&mut self) {
        self.forget();
        self.last = None;
    }

    /// Record `(w, g = F(w) − w)` and propose the next point, if any.
    fn propose(&mut self, w: &[f64], g: &[f64]) -> Option<Vec<f64>> {
        if let Some((mut lw, mut lg)) = self.last.take() {
            if self.dg.len() == self.memory {
                self.step.remove(0);
                self.dg.remove(0);
                self.gram.remove(0);
                self.gram.iter_mut().for_each(|row| {
                    row.remove(0);
                });
            }
            for ((a, b), (c, d)) in lw.iter_mut().zip(w).zip(lg.iter_mut().zip(g)) {
                *c = d - *c;
                *a = (b - *a) + *c;
            }
            let dots: Vec<f64> = self.dg.iter().map(|v| dot(v, &lg)).collect();
            for (row, d) in self.gram.iter_mut().zip(&dots) {
                row.push(*d);
            }
            let mut own = dots;
            own.push(dot(&lg, &lg));
            self.gram.push(own);
            self.step.push(lw);
            self.dg.push(lg);
        }
        self.last = Some((w.to_vec(), g.to_vec()));
        let k = self.dg.len();
        if k == 0 {
            return None;
        }
        let mut gram = nalgebra::DMatrix::from_fn(k, k, |a, b| self.gram[a][b]);
        let rhs = nalgebra::DVector::from_iterator(k, self.dg.iter().map(|v| dot(v, g)));
        let reg = 1e-10 * gram.trace().max(f64::MIN_POSITIVE);
        for a in 0..k {
            gram[(a, a)] += reg;
        }
        let gamma = gram.cholesky()?.solve(&rhs);
        if gamma.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut out: Vec<f64> = w.iter().zip(g).map(|(a, b)| a + b).collect();
        for (a, coef) in gamma.iter().enumerate() {
            for (o, s) in out.iter_mut().zip(&self.step[a]) {
                *o -= coef * s;
            }
        }
        Some(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ANDERSON_MEMORY: usize = 10;

fn solve_scaled<M: LinearMaps>(
    maps: &M,
    blocks: &[Block],
    constraints: &[Vec<(usize, f64)>],
    ordering: &[usize],
    x0: &[f64],
    dual0: Option<&DualState>,
    settings: &AdmmSettings,
) -> Result<Solution> {
    let n = maps.n_vars();
    let nb = blocks.len();

    // Equilibrate blocks so each contributes a unit average diagonal.
    let scale: Vec<f64> = blocks
        .iter()
        .map(|b| {
            let tr = b.gram.diagonal_sum();
            if tr > 0.0 { n as f64 / tr } else { 1.0 }
        })
        .collect();
    let rho: Vec<f64> = match dual0 {
        Some(d) => scale.iter().zip(&d.rho_factor).map(|(s, f)| s * f).collect(),
        None => scale.clone(),
    };
    let fac = factor_system(blocks, &rho, ordering, constraints)?;
    let mut engine = Engine {
        maps,
        blocks,
        rho,
        fac,
        work: blocks.iter().map(|b| vec![0.0; b.offset.len()]).collect(),
        rhs: vec![0.0; n],
    };
    let mut stats = AdmmStats::default();

    let mut x = x0.to_vec();
    let mut ax: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.offset.len()]).collect();
    maps.forward(&x, &mut ax);
    let u: Vec<Vec<f64>> = match dual0 {
        Some(d) => d.y.iter().zip(&engine.rho).map(|(y, r)| y.iter().map(|v| v / r).collect()).collect(),
        None => ax.iter().map(|a| vec![0.0; a.len()]).collect(),
    };
    let mut w = State { z: u.clone(), u };
    for b in 0..nb {
        let mut v: Vec<f64> = ax[b].iter().zip(&blocks[b].offset).zip(&w.u[b]).map(|((a, c), u)| a + c + u).collect();
        blocks[b].penalty.prox_in_place(&mut v, engine.rho[b]);
        for idx in 0..v.len() {
            w.u[b][idx] += ax[b][idx] + blocks[b].offset[idx] - v[idx];
        }
        w.z[b] = v;
    }

    let mut aa = Anderson::new(ANDERSON_MEMORY);
    let mut flat_w = Vec::new();
    let mut flat_f = Vec::new();
    let mut ax_trial: Vec<Vec<f64>> = ax.clone();
    let (mut f, mut fx) = engine.step(&w, &x, &mut ax)?;
    let mut dual_tmp = vec![0.0; n];
    let mut coef = vec![0.0; nb];

    for it in 1..=settings.max_iter {
        stats.iterations = it;
        // (w, f = F(w), fx, ax) describe the sweep just taken.
        x = fx.clone();
        let adapt_now = it % ADAPT_EVERY == 0 && stats.refactorizations < MAX_REFACTOR;
        if it % CHECK_EVERY == 0 || it == settings.max_iter || adapt_now {
            let mut primal_b = vec![0.0; nb];
            let mut primal_scale_b = vec![0.0; nb];
            for b in 0..nb {
                let mut p_sq = 0.0;
                for idx in 0..f.z[b].len() {
                    let r = ax[b][idx] + blocks[b].offset[idx] - f.z[b][idx];
                    p_sq += r * r;
                }
                primal_b[b] = p_sq;
                primal_scale_b[b] = sq_norm(&ax[b]).max(sq_norm(&f.z[b])).max(sq_norm(&blocks[b].offset));
            }
            let mut dz: Vec<Vec<f64>> = Vec::with_capacity(nb);
            for b in 0..nb {
                dz.push(f.z[b].iter().zip(&w.z[b]).map(|(a, c)| a - c).collect());
            }
            maps.adjoint(&dz, &engine.rho, &mut dual_tmp);
            let dual = sq_norm(&dual_tmp).sqrt();
            // Stationarity balances the blocks against each other, so the
            // dual scale is taken per block rather than from their sum.
            let mut dual_scale_b = vec![0.0; nb];
            for b in 0..nb {
                coef.iter_mut().for_each(|c| *c = 0.0);
                coef[b] = engine.rho[b];
                maps.adjoint(&f.u, &coef, &mut dual_tmp);
                dual_scale_b[b] = sq_norm(&dual_tmp).sqrt();
            }
            let dual_scale = dual_scale_b.iter().cloned().fold(0.0, f64::max);
            let primal = primal_b.iter().sum::<f64>().sqrt();
            let primal_scale = primal_scale_b.iter().sum::<f64>().sqrt();
            stats.primal_residual = primal;
            stats.dual_residual = dual;
            stats.primal_scale = primal_scale;
            stats.dual_scale = dual_scale;

            let abs_floor = 1e-14 * (n as f64).sqrt();
            if primal <= abs_floor + settings.tol * primal_scale && dual <= abs_floor + settings.tol * dual_scale {
                stats.converged = true;
                w = f;
                break;
            }

            if adapt_now {
                // Balance each block on its own: the penalties live on very
                // different scales, so a single ρ cannot serve them all.
                let mut changed = false;
                for b in 0..nb {
                    if primal_scale_b[b] <= 0.0 {
                        continue;
                    }
                    coef.iter_mut().for_each(|c| *c = 0.0);
                    coef[b] = engine.rho[b];
                    maps.adjoint(&dz, &coef, &mut dual_tmp);
                    let d = sq_norm(&dual_tmp).sqrt();
                    let d_scale = dual_scale_b[b];
                    let p_rel = (primal_b[b] / primal_scale_b[b]).sqrt();
                    let ratio = if p_rel <= 0.0 {
                        continue;
                    } else if d_scale <= 0.0 {
                        // inactive block: its ρ only slows x down
                        1.0 / (2.0 * ADAPT_RATIO)
                    } else if d <= 0.0 {
                        // z is pinned (e.g. fully shrunk); only a larger ρ moves it
                        2.0 * ADAPT_RATIO
                    } else {
                        (p_rel / (d / d_scale)).sqrt()
                    };
                    if (1.0 / ADAPT_RATIO..=ADAPT_RATIO).contains(&ratio) {
                        continue;
                    }
                    let lo = scale[b] / RHO_RANGE;
                    let hi = scale[b] * RHO_RANGE;
                    let target = (engine.rho[b] * ratio.clamp(0.1, 10.0)).clamp(lo, hi);
                    if target != engine.rho[b] {
                        let factor = target / engine.rho[b];
                        f.u[b].iter_mut().for_each(|v| *v /= factor);
                        engine.rho[b] = target;
                        changed = true;
                    }
                }
                if changed {
                    engine.fac = factor_system(blocks, &engine.rho, ordering, constraints)?;
                    stats.refactorizations += 1;
                    aa.reset();
                    w = f;
                    let (nf, nx) = engine.step(&w, &x, &mut ax)?;
                    f = nf;
                    fx = nx;
                    continue;
                }
            }
        }

        // Next point: Anderson extrapolation if it lowers the fixed-point
        // residual, the plain sweep otherwise.
        w.flatten(&engine.rho, &mut flat_w);
        f.flatten(&engine.rho, &mut flat_f);
        let g: Vec<f64> = flat_f.iter().zip(&flat_w).map(|(a, b)| a - b).collect();
        let g_norm = sq_norm(&g);
        let mut accepted = false;
        if let Some(cand) = aa.propose(&flat_w, &g) {
            let mut wc = w.clone();
            wc.unflatten(&engine.rho, &cand);
            let (fc, xc) = engine.step(&wc, &x, &mut ax_trial)?;
            fc.flatten(&engine.rho, &mut flat_f);
            let gc: f64 = flat_f.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            if gc < g_norm {
                w = wc;
                f = fc;
                fx = xc;
                std::mem::swap(&mut ax, &mut ax_trial);
                accepted = true;
            }
        }
        if !accepted {
            aa.forget();
            w = f;
            let (nf, nx) = engine.step(&w, &x, &mut ax)?;
            f = nf;
            fx = nx;
        }
    }
    let rho = engine.rho;
    let dual = DualState {
        y: w.u.iter().zip(&rho).map(|(ub, r)| ub.iter().map(|v| v * r).collect()).collect(),
        rho_factor: rho.iter().zip(&scale).map(|(r, s)| r / s).collect(),
    };
    Ok(Solution { x, dual, stats })
}
