//! Difference operators and the tilted-ℓ1 (pinball) penalty.
//!
//! The operators are matrix-free: each has a forward map and an adjoint so
//! the splitting solver can use them without materializing banded matrices.

use crate::error::{Result, ScsfError};

/// A finite-difference operator acting on a vector of length `input_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffKind {
    First,
    Second,
    FirstLagged { lag: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffOperator {
    pub kind: DiffKind,
    pub input_len: usize,
}

impl DiffOperator {
    pub fn new(kind: DiffKind, input_len: usize) -> Result<Self> {
        let op = DiffOperator { kind, input_len };
        let min = match kind {
            DiffKind::First => 2,
            DiffKind::Second => 3,
            DiffKind::FirstLagged { lag } => {
                if lag == 0 {
                    return Err(ScsfError::Size("lag must be at least 1".into()));
                }
                lag + 1
            }
        };
        if input_len < min {
            return Err(ScsfError::Size(format!(
                "{kind:?} difference needs at least {min} entries, got {input_len}"
            )));
        }
        Ok(op)
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            DiffKind::First => self.input_len - 1,
            DiffKind::Second => self.input_len - 2,
            DiffKind::FirstLagged { lag } => self.input_len - lag,
        }
    }

    /// `(offset, coefficient)` stencil: `y_k = Σ c · x_{k + offset}`.
    pub fn stencil(&self) -> &'static [(usize, f64)] {
        match self.kind {
            DiffKind::First => &[(0, -1.0), (1, 1.0)],
            DiffKind::Second => &[(0, 1.0), (1, -2.0), (2, 1.0)],
            // lag offset is dynamic; handled separately
            DiffKind::FirstLagged { .. } => &[],
        }
    }

    fn taps(&self) -> Vec<(usize, f64)> {
        match self.kind {
            DiffKind::FirstLagged { lag } => vec![(0, -1.0), (lag, 1.0)],
            _ => self.stencil().to_vec(),
        }
    }

    /// Forward map into `out` (length `output_len`).
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_len);
        debug_assert_eq!(out.len(), self.output_len());
        let taps = self.taps();
        for (k, y) in out.iter_mut().enumerate() {
            *y = taps.iter().map(|&(o, c)| c * x[k + o]).sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        self.apply_into(x, &mut out);
        out
    }

    /// Adjoint map, accumulated into `out` (length `input_len`).
    pub fn adjoint_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.output_len());
        debug_assert_eq!(out.len(), self.input_len);
        for (o, c) in self.taps() {
            for (k, &v) in y.iter().enumerate() {
                out[k + o] += c * v;
            }
        }
    }

    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len];
        self.adjoint_add(y, &mut out);
        out
    }
}

pub fn diff1(x: &[f64]) -> Result<Vec<f64>> {
    Ok(DiffOperator::new(DiffKind::First, x.len())?.apply(x))
}

pub fn diff2(x: &[f64]) -> Result<Vec<f64>> {
    Ok(DiffOperator::new(DiffKind::Second, x.len())?.apply(x))
}

pub fn diff1_lagged(x: &[f64], lag: usize) -> Result<Vec<f64>> {
    Ok(DiffOperator::new(DiffKind::FirstLagged { lag }, x.len())?.apply(x))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(ScsfError::Config(format!("tau must lie in (0, 1), got {tau}")))
    }
}

/// Scalar tilted-ℓ1 penalty `½|x| + (τ − ½)x`.
#[inline]
pub fn tilted_l1_scalar(x: f64, tau: f64) -> f64 {
    0.5 * x.abs() + (tau - 0.5) * x
}

/// Elementwise tilted-ℓ1 penalty, summed. Positive entries cost `τ` per unit,
/// negative entries `1 − τ` per unit.
pub fn tilted_l1(x: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(x.iter().map(|&v| tilted_l1_scalar(v, tau)).sum())
}

/// Proximal map of `step · φ_τ` at a single point.
#[inline]
pub fn prox_tilted_l1_scalar(v: f64, tau: f64, step: f64) -> f64 {
    let hi = step * tau;
    let lo = step * (1.0 - tau);
    if v > hi {
        v - hi
    } else if v < -lo {
        v + lo
    } else {
        0.0
    }
}

/// Elementwise `argmin_x φ_τ(x) + ‖x − v‖² / (2·step)`.
pub fn prox_tilted_l1(v: &[f64], tau: f64, step: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if !(step > 0.0) {
        return Err(ScsfError::Config(format!("prox step must be positive, got {step}")));
    }
    Ok(v.iter().map(|&x| prox_tilted_l1_scalar(x, tau, step)).collect())
}

/// Proximal map of `scale · ‖·‖₂` applied to a whole block in place
/// (block soft-thresholding).
pub fn prox_norm_in_place(v: &mut [f64], scale: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= scale {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        let shrink = 1.0 - scale / norm;
        v.iter_mut().for_each(|x| *x *= shrink);
    }
}
