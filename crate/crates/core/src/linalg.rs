//! Cached factorization of the symmetric systems solved at every splitting
//! iteration.
//!
//! The system has a large sparse "core" block that is banded under a
//! caller-supplied ordering, bordered by a handful of dense rows (extra
//! variables such as the degradation offset, and Lagrange multipliers for
//! equality constraints):
//!
//! ```text
//! [ H  Fᵀ ] [x]   [a]
//! [ F  S  ] [y] = [b]
//! ```
//!
//! `H` is factored once by banded Cholesky; the border is eliminated through
//! the small Schur complement `S − F H⁻¹ Fᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ScsfError};

/// Symmetric positive definite band matrix stored row-wise: row `i` holds
/// columns `i − bw ..= i`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Factor `H = G Gᵀ` in place. `entries` are lower-triangle `(i, j, v)`
    /// with `j ≤ i` and `i − j ≤ bw`; duplicates accumulate.
    pub fn factor(n: usize, bw: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut chol = BandedCholesky { n, bw, band: vec![0.0; n * (bw + 1)] };
        for (i, j, v) in entries {
            debug_assert!(j <= i && i - j <= bw);
            let k = chol.idx(i, j);
            chol.band[k] += v;
        }
        for i in 0..n {
            let start = i.saturating_sub(bw);
            for j in start..=i {
                let kstart = start.max(j.saturating_sub(bw));
                let mut sum = chol.band[chol.idx(i, j)];
                for k in kstart..j {
                    sum -= chol.band[chol.idx(i, k)] * chol.band[chol.idx(j, k)];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(ScsfError::Numeric(format!(
                            "system matrix is not positive definite at pivot {i} ({sum:e})"
                        )));
                    }
                    let k = chol.idx(i, i);
                    chol.band[k] = sum.sqrt();
                } else {
                    let k = chol.idx(i, j);
                    chol.band[k] = sum / chol.band[chol.idx(j, j)];
                }
            }
        }
        Ok(chol)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let start = i.saturating_sub(self.bw);
            let mut sum = x[i];
            for k in start..i {
                sum -= self.band[self.idx(i, k)] * x[k];
            }
            x[i] = sum / self.band[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let end = (i + self.bw).min(n - 1);
            let mut sum = x[i];
            for k in i + 1..=end {
                sum -= self.band[self.idx(k, i)] * x[k];
            }
            x[i] = sum / self.band[self.idx(i, i)];
        }
    }
}

/// Accumulates a symmetric matrix over `n_core` banded variables plus
/// `n_extra` dense border variables. Entries are added one ordered pair at a
/// time; callers must add both `(a, b)` and `(b, a)` for off-diagonal terms.
#[derive(Debug, Clone)]
pub struct SymmetricAssembler {
    n_core: usize,
    n_extra: usize,
    core: Vec<(usize, usize, f64)>,
    border: DMatrix<f64>,
    corner: DMatrix<f64>,
}

impl SymmetricAssembler {
    pub fn new(n_core: usize, n_extra: usize) -> Self {
        SymmetricAssembler {
            n_core,
            n_extra,
            core: Vec::new(),
            border: DMatrix::zeros(n_extra, n_core),
            corner: DMatrix::zeros(n_extra, n_extra),
        }
    }

    pub fn dim(&self) -> usize {
        self.n_core + self.n_extra
    }

    pub fn n_core(&self) -> usize {
        self.n_core
    }

    pub fn add(&mut self, a: usize, b: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        match (a < self.n_core, b < self.n_core) {
            (true, true) => self.core.push((a, b, v)),
            (false, true) => self.border[(a - self.n_core, b)] += v,
            // mirrored by the (false, true) entry
            (true, false) => {}
            (false, false) => self.corner[(a - self.n_core, b - self.n_core)] += v,
        }
    }

    /// Symmetric rank-one style helper: adds `v` at `(a, b)` and, when
    /// distinct, at `(b, a)`.
    pub fn add_sym(&mut self, a: usize, b: usize, v: f64) {
        self.add(a, b, v);
        if a != b {
            self.add(b, a, v);
        }
    }

    pub fn diagonal_sum(&self) -> f64 {
        let core: f64 = self.core.iter().filter(|(a, b, _)| a == b).map(|t| t.2).sum();
        core + self.corner.diagonal().sum()
    }

    /// Combine `Σ scale_k · parts_k` into one assembler of the same shape.
    pub fn combine(parts: &[(&SymmetricAssembler, f64)]) -> Self {
        let first = parts[0].0;
        let mut out = SymmetricAssembler::new(first.n_core, first.n_extra);
        for (p, s) in parts {
            out.core.extend(p.core.iter().map(|&(a, b, v)| (a, b, v * s)));
            out.border += &p.border * *s;
            out.corner += &p.corner * *s;
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        for &(a, b, v) in &self.core {
            if a == b {
                d[a] += v;
            }
        }
        for r in 0..self.n_extra {
            d[self.n_core + r] += self.corner[(r, r)];
        }
        d
    }

    /// Replace `H` by `S H S` with `S = diag(s)`.
    pub fn scale_symmetric(&mut self, s: &[f64]) {
        for t in &mut self.core {
            t.2 *= s[t.0] * s[t.1];
        }
        for r in 0..self.n_extra {
            let sr = s[self.n_core + r];
            for c in 0..self.n_core {
                self.border[(r, c)] *= sr * s[c];
            }
            for c in 0..self.n_extra {
                self.corner[(r, c)] *= sr * s[self.n_core + c];
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for &(a, b, v) in &self.core {
            h[(a, b)] += v;
        }
        for r in 0..self.n_extra {
            for c in 0..self.n_core {
                h[(self.n_core + r, c)] += self.border[(r, c)];
                h[(c, self.n_core + r)] += self.border[(r, c)];
            }
            for c in 0..self.n_extra {
                h[(self.n_core + r, self.n_core + c)] += self.corner[(r, c)];
            }
        }
        h
    }

    pub fn add_identity(&mut self, shift: f64) {
        for i in 0..self.n_core {
            self.core.push((i, i, shift));
        }
        for i in 0..self.n_extra {
            self.corner[(i, i)] += shift;
        }
    }
}

/// Factored bordered system with optional equality constraints `C x = 0`.
#[derive(Debug, Clone)]
pub struct BorderedFactor {
    /// variable index → position in the banded ordering
    position: Vec<usize>,
    chol: BandedCholesky,
    /// extra rows: border variables, then constraint multipliers (s × n_core, in banded positions)
    border: DMatrix<f64>,
    /// H⁻¹ Fᵀ, columns in banded positions
    h_inv_ft: DMatrix<f64>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n_core: usize,
    n_extra: usize,
}

impl BorderedFactor {
    /// `ordering[k]` is the core variable placed at banded position `k`.
    /// `constraints` are sparse rows over all variables (core and extra).
    pub fn new(
        system: &SymmetricAssembler,
        ordering: &[usize],
        constraints: &[Vec<(usize, f64)>],
    ) -> Result<Self> {
        let n_core = system.n_core;
        let n_extra = system.n_extra;
        assert_eq!(ordering.len(), n_core);
        let mut position = vec![0usize; n_core];
        for (k, &v) in ordering.iter().enumerate() {
            position[v] = k;
        }
        let mut bw = 0usize;
        let lower: Vec<(usize, usize, f64)> = system
            .core
            .iter()
            .filter_map(|&(a, b, v)| {
                let (pa, pb) = (position[a], position[b]);
                (pa >= pb).then(|| {
                    bw = bw.max(pa - pb);
                    (pa, pb, v)
                })
            })
            .collect();
        let chol = BandedCholesky::factor(n_core, bw, lower)?;

        let s = n_extra + constraints.len();
        let mut border = DMatrix::zeros(s, n_core);
        let mut corner = DMatrix::zeros(s, s);
        for r in 0..n_extra {
            for c in 0..n_core {
                border[(r, position[c])] = system.border[(r, c)];
            }
            for c in 0..n_extra {
                corner[(r, c)] = system.corner[(r, c)];
            }
        }
        for (q, row) in constraints.iter().enumerate() {
            let r = n_extra + q;
            for &(var, coef) in row {
                if var < n_core {
                    border[(r, position[var])] += coef;
                } else {
                    corner[(r, var - n_core)] += coef;
                    corner[(var - n_core, r)] += coef;
                }
            }
        }

        let mut h_inv_ft = border.transpose();
        for mut col in h_inv_ft.column_iter_mut() {
            chol.solve_in_place(col.as_mut_slice());
        }
        let schur = corner - &border * &h_inv_ft;
        let schur = schur.lu();
        if !schur.is_invertible() {
            return Err(ScsfError::Numeric("bordered system is singular (redundant constraints?)".into()));
        }
        Ok(BorderedFactor { position, chol, border, h_inv_ft, schur, n_core, n_extra })
    }

    pub fn bandwidth(&self) -> usize {
        self.chol.bandwidth()
    }

    /// Solve for all variables; `rhs` covers core and extra variables, and the
    /// constraint right-hand sides are zero.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n_core = self.n_core;
        let mut core = vec![0.0; n_core];
        for (v, &p) in self.position.iter().enumerate() {
            core[p] = rhs[v];
        }
        self.chol.solve_in_place(&mut core);
        let s = self.border.nrows();
        if s == 0 {
            return self.position.iter().map(|&p| core[p]).collect();
        }
        let mut tail = DVector::zeros(s);
        for r in 0..self.n_extra {
            tail[r] = rhs[n_core + r];
        }
        let fx = &self.border * DVector::from_column_slice(&core);
        tail -= fx;
        let y = self.schur.solve(&tail).expect("schur complement checked invertible");
        let corr = &self.h_inv_ft * &y;
        let mut out = vec![0.0; n_core + self.n_extra];
        for (v, &p) in self.position.iter().enumerate() {
            out[v] = core[p] - corr[p];
        }
        for r in 0..self.n_extra {
            out[n_core + r] = y[r];
        }
        out
    }
}
