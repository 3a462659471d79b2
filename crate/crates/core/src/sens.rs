//! Dense sensitivity matrix `F` of the parameter-to-observable map, obtained
//! from one matrix-valued adjoint final-value problem.

use alloc::collections::TryReserveError;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::factor::SparseLu;
use crate::femkit::StateSpaceSystem;
use crate::forward::TimeGrid;
use crate::sparse::CsrMatrix;

/// Linear part of an affine parameter-to-observable map.
pub trait ParameterToObservable {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
    fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Factorizations for the backward recurrence
/// `(𝕄ᵀ + τ𝕂ᵀ) S(t_{s−1}) = 𝕄ᵀ S(t_s)`, `𝕄ᵀ S(T) = −Cᵀ`.
#[derive(Debug, Clone)]
pub struct AdjointSolver<'a> {
    sys: &'a StateSpaceSystem,
    n_t: usize,
    mt: CsrMatrix,
    mt_lu: SparseLu<f64>,
    step_lu: SparseLu<f64>,
}

impl<'a> AdjointSolver<'a> {
    pub fn new(sys: &'a StateSpaceSystem, grid: &TimeGrid) -> Result<Self> {
        let mt = sys.m_phys.transpose();
        let kt = sys.k_phys.transpose();
        let step = mt.linear_combination(1.0, &kt, grid.dt);
        Ok(Self {
            sys,
            n_t: grid.n_t,
            mt_lu: SparseLu::new(&mt)?,
            step_lu: SparseLu::new(&step)?,
            mt,
        })
    }

    fn final_value(&self, j: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.sys.n_x];
        for (k, v) in self.sys.c.row(j) {
            s[k] = -v;
        }
        self.mt_lu.solve_in_place(&mut s);
        s
    }

    /// Column `j` of `S(t_s)` for `s = 0..=n_t`, indexed by `s`.
    pub fn column_sequence(&self, j: usize) -> Vec<Vec<f64>> {
        let mut seq = vec![Vec::new(); self.n_t + 1];
        seq[self.n_t] = self.final_value(j);
        for s in (1..=self.n_t).rev() {
            let rhs = self.mt.apply(&seq[s]);
            seq[s - 1] = self.step_lu.solve(&rhs);
        }
        seq
    }

    /// Streams row `j` of every time block of `F`, block `s` being
    /// `−S(T − t_s)ᵀ 𝕄`. Block 0 is the `j`-th row of `C` itself.
    pub fn sensitivity_rows(&self, j: usize, mut sink: impl FnMut(usize, &[f64])) {
        let mut row = vec![0.0; self.sys.n_x];
        for (k, v) in self.sys.c.row(j) {
            row[k] = v;
        }
        sink(0, &row);
        // 𝕄ᵀ S(T) = −Cᵀ
        let mut m_s: Vec<f64> = row.iter().map(|v| -v).collect();
        for s in 1..=self.n_t {
            let mut next = m_s;
            self.step_lu.solve_in_place(&mut next);
            m_s = self.mt.apply(&next);
            row.iter_mut().zip(&m_s).for_each(|(r, v)| *r = -v);
            sink(s, &row);
        }
    }
}

/// `S(t_s)` as `n_x × n_y` matrices for `s = 0..=n_t`.
pub fn solve_adjoint(sys: &StateSpaceSystem, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let solver = AdjointSolver::new(sys, grid)?;
    let mut out = vec![DMatrix::zeros(sys.n_x, sys.n_y); grid.n_points()];
    for j in 0..sys.n_y {
        for (s, col) in solver.column_sequence(j).into_iter().enumerate() {
            out[s].set_column(j, &nalgebra::DVector::from_vec(col));
        }
    }
    Ok(out)
}

/// Dense `F`, `(n_t+1)·n_y × n_x`, row-major and time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub n_y: usize,
    pub memory_bytes: usize,
}

impl SensitivityBundle {
    /// Allocates a zero matrix, reporting an explicit resource error when the
    /// allocation is impossible.
    pub fn zeros(n_points: usize, n_y: usize, cols: usize) -> Result<Self> {
        let too_large = Error::Resource { bytes: usize::MAX };
        let rows = n_points.checked_mul(n_y).ok_or(too_large.clone())?;
        let len = rows.checked_mul(cols).ok_or(too_large)?;
        let bytes = len.saturating_mul(core::mem::size_of::<f64>());
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_: TryReserveError| Error::Resource { bytes })?;
        data.resize(len, 0.0);
        Ok(Self {
            rows,
            cols,
            data,
            n_y,
            memory_bytes: bytes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row of output `j` at time point `s`.
    pub fn block_row_mut(&mut self, s: usize, j: usize) -> &mut [f64] {
        let r = s * self.n_y + j;
        self.row_mut(r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `F v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", self.cols, v.len())?;
        Ok((0..self.rows).map(|r| crate::sparse::dot(self.row(r), v)).collect())
    }

    /// `Fᵀ w`
    pub fn rmatvec(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len("observation vector", self.rows, w.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &wr) in w.iter().enumerate() {
            if wr != 0.0 {
                crate::sparse::axpy(wr, self.row(r), &mut out);
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl ParameterToObservable for SensitivityBundle {
    fn n_params(&self) -> usize {
        self.cols
    }

    fn n_obs(&self) -> usize {
        self.rows
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec(v)
    }

    fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.rmatvec(w)
    }
}

/// Builds `F = −Σ_s e_s ⊗ S(T − t_s)ᵀ 𝕄` from a single adjoint solve.
pub fn assemble_f(sys: &StateSpaceSystem, grid: &TimeGrid) -> Result<SensitivityBundle> {
    let mut f = SensitivityBundle::zeros(grid.n_points(), sys.n_y, sys.n_x)?;
    let solver = AdjointSolver::new(sys, grid)?;
    for j in 0..sys.n_y {
        solver.sensitivity_rows(j, |s, row| f.block_row_mut(s, j).copy_from_slice(row));
    }
    Ok(f)
}
