//! Two-core tensor trains for space-time vectors and an alternating
//! low-rank solver for Kronecker-structured all-at-once systems.
//!
//! A space-time vector `x` of length `(n_t+1)·n_x` is stored time-major,
//! `x[s·n_x + i] = X[i, s]`, and represented as `X = S Tᵀ` with a temporal
//! core `T` of shape `(n_t+1) × r` and a spatial core `S` of shape `n_x × r`.
//! A Kronecker term `A ⊗ B` (temporal `A`, spatial `B`) acts as
//! `X ↦ B X Aᵀ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::factor::{Ordering, SparseLu};
use crate::femkit::StateSpaceSystem;
use crate::forward::TimeGrid;
use crate::noise::NoiseModel;
use crate::prior::PriorModel;
use crate::sens::ParameterToObservable;
use crate::sparse::{CsrMatrix, TripletBuilder};

type C64 = Complex<f64>;

/// Size above which the convergence residual is evaluated from the factors
/// instead of the contracted space-time matrix.
const DENSE_RESIDUAL_LIMIT: usize = 100_000;
/// Largest local system handled by the dense fallback for operators with
/// more than two terms.
const DENSE_LOCAL_LIMIT: usize = 4_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TtVector {
    temporal: DMatrix<f64>,
    spatial: DMatrix<f64>,
}

impl TtVector {
    /// `temporal` is `(n_t+1) × r`, `spatial` is `n_x × r`.
    pub fn new(temporal: DMatrix<f64>, spatial: DMatrix<f64>) -> Result<Self> {
        check_len("tensor-train rank", temporal.ncols(), spatial.ncols())?;
        if temporal.ncols() == 0 {
            return Err(Error::Validation("tensor-train rank must be at least 1".into()));
        }
        Ok(Self { temporal, spatial })
    }

    pub fn rank1(temporal: &[f64], spatial: &[f64]) -> Self {
        Self {
            temporal: DMatrix::from_column_slice(temporal.len(), 1, temporal),
            spatial: DMatrix::from_column_slice(spatial.len(), 1, spatial),
        }
    }

    pub fn zeros(n_time: usize, n_space: usize) -> Self {
        Self {
            temporal: DMatrix::zeros(n_time, 1),
            spatial: DMatrix::zeros(n_space, 1),
        }
    }

    /// Exact rank-`min` representation of a full `n_x × (n_t+1)` matrix.
    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let spatial = x.clone();
        let temporal = DMatrix::identity(x.ncols(), x.ncols());
        tt_round(&Self { temporal, spatial }, 0.0)
    }

    pub fn tt_rank(&self) -> usize {
        self.temporal.ncols()
    }

    pub fn n_time(&self) -> usize {
        self.temporal.nrows()
    }

    pub fn n_space(&self) -> usize {
        self.spatial.nrows()
    }

    pub fn temporal_core(&self) -> &DMatrix<f64> {
        &self.temporal
    }

    /// Spatial core with the spatial vectors `x_α` as columns.
    pub fn spatial_core(&self) -> &DMatrix<f64> {
        &self.spatial
    }

    /// `X = S Tᵀ`, `n_x × (n_t+1)`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        &self.spatial * self.temporal.transpose()
    }

    /// Full vector, time-major.
    pub fn contract(&self) -> Vec<f64> {
        self.to_matrix().as_slice().to_vec()
    }

    /// Spatial vector at time point `s`.
    pub fn time_slice(&self, s: usize) -> Vec<f64> {
        (&self.spatial * self.temporal.row(s).transpose()).as_slice().to_vec()
    }

    pub fn norm(&self) -> f64 {
        factored_norm(&self.spatial, &self.temporal)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            temporal: self.temporal.clone(),
            spatial: &self.spatial * alpha,
        }
    }

    /// Exact sum; ranks add.
    pub fn add(&self, other: &Self) -> Result<Self> {
        check_len("time points", self.n_time(), other.n_time())?;
        check_len("spatial dimension", self.n_space(), other.n_space())?;
        Ok(Self {
            temporal: hcat(&[&self.temporal, &other.temporal]),
            spatial: hcat(&[&self.spatial, &other.spatial]),
        })
    }
}

fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Thin QR, `A = Q R` with `Q` of shape `m × min(m, n)`.
fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// Frobenius norm of `S Tᵀ` from its factors without forming the product.
fn factored_norm(spatial: &DMatrix<f64>, temporal: &DMatrix<f64>) -> f64 {
    if temporal.nrows() < spatial.nrows() {
        let (_, r) = thin_qr(temporal);
        (spatial * r.transpose()).norm()
    } else {
        let (_, r) = thin_qr(spatial);
        (&r * temporal.transpose()).norm()
    }
}

/// Singular values in descending order with matching singular vectors.
fn sorted_svd(a: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), idx.len(), |r, c| u[(r, idx[c])]);
    let v = DMatrix::from_fn(vt.ncols(), idx.len(), |r, c| vt[(idx[c], r)]);
    (u, sigma, v)
}

/// Smallest rank whose discarded singular values have norm `≤ tol·‖σ‖`.
fn truncation_rank(sigma: &[f64], tol: f64, max_rank: usize) -> usize {
    // tails[k] = Σ_{i ≥ k} σ_i², accumulated from the small end
    let mut tails = vec![0.0; sigma.len() + 1];
    for k in (0..sigma.len()).rev() {
        tails[k] = tails[k + 1] + sigma[k] * sigma[k];
    }
    let bound = tol * libm::sqrt(tails[0]);
    let rank = (0..=sigma.len())
        .find(|&k| libm::sqrt(tails[k]) <= bound)
        .unwrap_or(sigma.len());
    rank.clamp(1, max_rank.max(1)).min(sigma.len().max(1))
}

/// Recompresses `x` to the smallest rank with relative Frobenius error
/// `≤ tol`. The returned temporal core has orthonormal columns.
pub fn tt_round(x: &TtVector, tol: f64) -> TtVector {
    tt_round_capped(x, tol, usize::MAX)
}

/// [`tt_round`] with an additional hard rank limit.
pub fn tt_round_capped(x: &TtVector, tol: f64, max_rank: usize) -> TtVector {
    let (qt, rt) = thin_qr(&x.temporal);
    let (qs, rs) = thin_qr(&x.spatial);
    let (u, sigma, v) = sorted_svd(&rs * rt.transpose());
    let k = truncation_rank(&sigma, tol, max_rank);
    let mut spatial = &qs * u.columns(0, k);
    for (c, s) in sigma.iter().take(k).enumerate() {
        spatial.column_mut(c).scale_mut(*s);
    }
    TtVector {
        temporal: &qt * v.columns(0, k),
        spatial,
    }
}

/// One Kronecker term `temporal ⊗ spatial`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerTerm {
    pub temporal: CsrMatrix,
    pub spatial: CsrMatrix,
}

/// Sum of Kronecker products acting on space-time vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerOperator {
    pub terms: Vec<KroneckerTerm>,
}

/// `B` with 1 on the diagonal and −1 on the first subdiagonal.
pub fn bidiagonal(n: usize) -> CsrMatrix {
    let mut b = TripletBuilder::new(n, n);
    for s in 0..n {
        b.push(s, s, 1.0);
        if s > 0 {
            b.push(s, s - 1, -1.0);
        }
    }
    b.build()
}

/// `id₀ = e₀ e₀ᵀ`
fn first_selector(n: usize) -> CsrMatrix {
    CsrMatrix::from_triplets(n, n, &[(0, 0, 1.0)]).expect("valid selector")
}

impl KroneckerOperator {
    pub fn new(terms: Vec<KroneckerTerm>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Validation("Kronecker operator without terms".into()))?;
        let (tr, tc, sr, sc) = (
            first.temporal.nrows(),
            first.temporal.ncols(),
            first.spatial.nrows(),
            first.spatial.ncols(),
        );
        for t in &terms {
            check_len("temporal factor rows", tr, t.temporal.nrows())?;
            check_len("temporal factor columns", tc, t.temporal.ncols())?;
            check_len("spatial factor rows", sr, t.spatial.nrows())?;
            check_len("spatial factor columns", sc, t.spatial.ncols())?;
        }
        Ok(Self { terms })
    }

    pub fn identity(n_time: usize, n_space: usize) -> Self {
        Self {
            terms: vec![KroneckerTerm {
                temporal: CsrMatrix::identity(n_time),
                spatial: CsrMatrix::identity(n_space),
            }],
        }
    }

    /// `𝒦 = τ I ⊗ 𝕂 + B ⊗ 𝕄`
    pub fn all_at_once(sys: &StateSpaceSystem, grid: &TimeGrid) -> Self {
        let n = grid.n_points();
        Self {
            terms: vec![
                KroneckerTerm {
                    temporal: CsrMatrix::identity(n).scaled(grid.dt),
                    spatial: sys.k_phys.clone(),
                },
                KroneckerTerm {
                    temporal: bidiagonal(n),
                    spatial: sys.m_phys.clone(),
                },
            ],
        }
    }

    /// `𝒞 = I ⊗ C`
    pub fn observation(sys: &StateSpaceSystem, grid: &TimeGrid) -> Self {
        Self {
            terms: vec![KroneckerTerm {
                temporal: CsrMatrix::identity(grid.n_points()),
                spatial: sys.c.clone(),
            }],
        }
    }

    /// `𝒩 = I ⊗ N`
    pub fn input(sys: &StateSpaceSystem, grid: &TimeGrid) -> Self {
        Self {
            terms: vec![KroneckerTerm {
                temporal: CsrMatrix::identity(grid.n_points()),
                spatial: sys.n.clone(),
            }],
        }
    }

    /// `ℳ₀ = id₀ ⊗ (τ𝕂 + 𝕄)`
    pub fn initial_lift(sys: &StateSpaceSystem, grid: &TimeGrid) -> Self {
        Self {
            terms: vec![KroneckerTerm {
                temporal: first_selector(grid.n_points()),
                spatial: sys.m_phys.linear_combination(1.0, &sys.k_phys, grid.dt),
            }],
        }
    }

    /// `Σ Aᵀ ⊗ Bᵀ`
    pub fn transpose(&self) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| KroneckerTerm {
                    temporal: t.temporal.transpose(),
                    spatial: t.spatial.transpose(),
                })
                .collect(),
        }
    }

    /// `(rows, cols)` of the temporal and spatial factors.
    pub fn temporal_shape(&self) -> (usize, usize) {
        (self.terms[0].temporal.nrows(), self.terms[0].temporal.ncols())
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.terms[0].spatial.nrows(), self.terms[0].spatial.ncols())
    }

    /// Dense matrix for time-major vectors; for oracle checks only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let ((tr, tc), (sr, sc)) = (self.temporal_shape(), self.spatial_shape());
        let mut out = DMatrix::zeros(tr * sr, tc * sc);
        for t in &self.terms {
            out += t.temporal.to_dense().kronecker(&t.spatial.to_dense());
        }
        out
    }

    /// `Σ B_j X A_jᵀ` for a full space-time matrix `X`.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let ((tr, _), (sr, _)) = (self.temporal_shape(), self.spatial_shape());
        let mut out = DMatrix::zeros(sr, tr);
        for t in &self.terms {
            let bx = t.spatial.mul_dense(x);
            out += t.temporal.mul_dense(&bx.transpose()).transpose();
        }
        out
    }
}

/// Exact termwise product; the result has rank `terms · rank(x)`.
pub fn op_apply(a: &KroneckerOperator, x: &TtVector) -> Result<TtVector> {
    check_len("temporal dimension", a.temporal_shape().1, x.n_time())?;
    check_len("spatial dimension", a.spatial_shape().1, x.n_space())?;
    let temporal: Vec<DMatrix<f64>> = a.terms.iter().map(|t| t.temporal.mul_dense(&x.temporal)).collect();
    let spatial: Vec<DMatrix<f64>> = a.terms.iter().map(|t| t.spatial.mul_dense(&x.spatial)).collect();
    Ok(TtVector {
        temporal: hcat(&temporal.iter().collect::<Vec<_>>()),
        spatial: hcat(&spatial.iter().collect::<Vec<_>>()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmenOptions {
    /// relative residual target
    pub tol: f64,
    /// rounding tolerance applied after every sweep
    pub round_tol: f64,
    pub max_rank: usize,
    pub max_sweeps: usize,
    /// number of residual directions added per sweep
    pub enrich_rank: usize,
}

impl Default for AmenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            round_tol: 1e-10,
            max_rank: 64,
            max_sweeps: 30,
            enrich_rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmenSolution {
    pub x: TtVector,
    pub converged: bool,
    pub sweeps: usize,
    /// relative residual `‖Ax − b‖ / ‖b‖` of `x`
    pub residual: f64,
}

/// Relative residual of `x` for `A x = b`.
pub fn relative_residual(a: &KroneckerOperator, x: &TtVector, b: &TtVector) -> Result<f64> {
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(x.norm());
    }
    if x.n_space() * x.n_time() <= DENSE_RESIDUAL_LIMIT {
        let r = a.apply_matrix(&x.to_matrix()) - b.to_matrix();
        return Ok(r.norm() / b_norm);
    }
    let ax = op_apply(a, x)?;
    let r = b.add(&ax.scale(-1.0))?;
    Ok(r.norm() / b_norm)
}

/// Leading singular directions of the residual `b − A x`, computed from its
/// factored form `Σ_j S_j T_jᵀ`. With a preconditioner the spatial factors
/// are mapped through `P⁻¹` before the decomposition; `norm` is always the
/// unpreconditioned residual norm.
struct ResidualDirections {
    spatial: DMatrix<f64>,
    temporal: DMatrix<f64>,
    sigma: Vec<f64>,
    norm: f64,
}

impl ResidualDirections {
    fn count(&self, limit: usize) -> usize {
        let floor = 1e-14 * self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().take(limit).take_while(|&&v| v > floor).count()
    }
}

fn residual_directions(
    temporal: &[&CsrMatrix],
    spatial: &[&CsrMatrix],
    x: &TtVector,
    b: &TtVector,
    precond: Option<&SparseLu<f64>>,
) -> ResidualDirections {
    let mut sres = vec![b.spatial.clone()];
    let mut tres = vec![b.temporal.clone()];
    for (at, bs) in temporal.iter().zip(spatial) {
        sres.push(-bs.mul_dense(&x.spatial));
        tres.push(at.mul_dense(&x.temporal));
    }
    let mut sres = hcat(&sres.iter().collect::<Vec<_>>());
    let (qt, rt) = thin_qr(&hcat(&tres.iter().collect::<Vec<_>>()));
    let norm = (&sres * rt.transpose()).norm();
    if let Some(lu) = precond {
        for mut col in sres.column_iter_mut() {
            lu.solve_in_place(col.as_mut_slice());
        }
    }
    let (qs, rs) = thin_qr(&sres);
    let (u, sigma, v) = sorted_svd(&rs * rt.transpose());
    ResidualDirections {
        spatial: qs * u,
        temporal: qt * v,
        sigma,
        norm,
    }
}

/// Index of the term whose projected temporal factor is best conditioned.
fn pivot_term(g: &[DMatrix<f64>]) -> usize {
    let cond = |m: &DMatrix<f64>| {
        let sv = m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    };
    let mut best = 0;
    let mut best_cond = f64::INFINITY;
    for (j, m) in g.iter().enumerate() {
        let c = cond(m);
        if c < best_cond {
            best = j;
            best_cond = c;
        }
    }
    best
}

fn spmv_complex(a: &CsrMatrix, x: &[C64]) -> Vec<C64> {
    (0..a.nrows())
        .map(|i| a.row(i).fold(C64::new(0.0, 0.0), |acc, (j, v)| acc + x[j] * v))
        .collect()
}

/// Solves `Σ_j B_j S G_jᵀ = R` for `S` (`n_x × r`).
fn spatial_solve(spatial: &[&CsrMatrix], g: &[DMatrix<f64>], rhs: &DMatrix<f64>, ordering: &Ordering) -> Result<DMatrix<f64>> {
    let (n, r) = rhs.shape();
    match spatial.len() {
        1 => {
            let lu = SparseLu::factor_combination(&[(1.0, spatial[0])], ordering)?;
            let mut y = rhs.clone();
            for mut col in y.column_iter_mut() {
                lu.solve_in_place(col.as_mut_slice());
            }
            // S G₁ᵀ = Y
            let gt = g[0].transpose();
            let s_t = gt
                .lu()
                .solve(&y.transpose())
                .ok_or(Error::Regularization("singular projected temporal factor"))?;
            Ok(s_t.transpose())
        }
        2 => {
            let p = pivot_term(g);
            let q = 1 - p;
            let g1t_inv = g[p]
                .transpose()
                .try_inverse()
                .ok_or(Error::Regularization("singular projected temporal factor"))?;
            // B_p S + B_q S H = R G_p⁻ᵀ with H = G_qᵀ G_p⁻ᵀ
            let h = g[q].transpose() * &g1t_inv;
            let hc: DMatrix<C64> = h.map(|v| C64::new(v, 0.0));
            let schur = nalgebra::Schur::try_new(hc, 1e-15, 10_000)
                .ok_or(Error::Regularization("Schur decomposition of the projected temporal factor did not converge"))?;
            let (qmat, u) = schur.unpack();
            let rc: DMatrix<C64> = (rhs * &g1t_inv).map(|v| C64::new(v, 0.0)) * &qmat;
            let mut y: DMatrix<C64> = DMatrix::zeros(n, r);
            let mut bq_y: Vec<Vec<C64>> = Vec::with_capacity(r);
            for j in 0..r {
                let mut col: Vec<C64> = rc.column(j).iter().copied().collect();
                for (i, bqi) in bq_y.iter().enumerate() {
                    let uij = u[(i, j)];
                    if uij != C64::new(0.0, 0.0) {
                        for (c, b) in col.iter_mut().zip(bqi) {
                            *c -= uij * b;
                        }
                    }
                }
                let lu = SparseLu::factor_combination(
                    &[(C64::new(1.0, 0.0), spatial[p]), (u[(j, j)], spatial[q])],
                    ordering,
                )?;
                lu.solve_in_place(&mut col);
                bq_y.push(spmv_complex(spatial[q], &col));
                y.set_column(j, &DVector::from_vec(col));
            }
            let s = y * qmat.adjoint();
            Ok(s.map(|v| v.re))
        }
        _ => {
            if n * r > DENSE_LOCAL_LIMIT {
                return Err(Error::Contract(format!(
                    "local spatial system of size {} exceeds the dense limit for operators with {} terms",
                    n * r,
                    spatial.len()
                )));
            }
            // vec(B S Gᵀ) = (G ⊗ B) vec(S), column-major
            let mut big = DMatrix::zeros(n * r, n * r);
            for (b, gj) in spatial.iter().zip(g) {
                big += gj.kronecker(&b.to_dense());
            }
            let x = big
                .lu()
                .solve(&DVector::from_column_slice(rhs.as_slice()))
                .ok_or(Error::Regularization("singular local spatial system"))?;
            Ok(DMatrix::from_column_slice(n, r, x.as_slice()))
        }
    }
}

/// Cached LU of a diagonal block of the temporal system.
struct BlockSolver {
    key: Vec<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    normal: Option<(DMatrix<f64>, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
}

impl BlockSolver {
    fn solve(&mut self, key: &[f64], k: &[DMatrix<f64>], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if self.key != key || (self.lu.is_none() && self.normal.is_none()) {
            let mut d = DMatrix::zeros(rhs.len(), rhs.len());
            for (c, kj) in key.iter().zip(k) {
                if *c != 0.0 {
                    d += kj * *c;
                }
            }
            self.key = key.to_vec();
            let lu = d.clone().lu();
            if lu.is_invertible() && lu_well_posed(&lu) {
                self.lu = Some(lu);
                self.normal = None;
            } else {
                log::warn!("singular temporal block, switching to normal equations");
                let dt = d.transpose();
                let normal = (&dt * &d).lu();
                if !normal.is_invertible() {
                    return Err(Error::Regularization("temporal block system"));
                }
                self.lu = None;
                self.normal = Some((dt, normal));
            }
        }
        if let Some(lu) = &self.lu {
            return lu.solve(rhs).ok_or(Error::Regularization("temporal block system"));
        }
        let (dt, normal) = self.normal.as_ref().unwrap();
        normal.solve(&(dt * rhs)).ok_or(Error::Regularization("temporal block system"))
    }
}

fn lu_well_posed(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diag.iter().all(|v| v.abs() > 1e-14 * max)
}

/// Solves `Σ_j A_j Y K_jᵀ = P` for the temporal core `Y` (`N_t × r`).
fn temporal_solve(temporal: &[&CsrMatrix], k: &[DMatrix<f64>], p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (nt, r) = p.shape();
    let lower = temporal.iter().all(|a| a.is_lower_triangular());
    let upper = temporal.iter().all(|a| a.is_upper_triangular());
    if !(lower || upper) {
        if nt * r > DENSE_LOCAL_LIMIT {
            return Err(Error::Contract(format!(
                "local temporal system of size {} exceeds the dense limit",
                nt * r
            )));
        }
        // unknowns ordered (s, α) row-major
        let mut big = DMatrix::zeros(nt * r, nt * r);
        for (a, kj) in temporal.iter().zip(k) {
            for (s, sp, v) in a.triplets() {
                let mut blk = big.view_mut((s * r, sp * r), (r, r));
                blk += kj * v;
            }
        }
        let rhs = DVector::from_iterator(nt * r, (0..nt).flat_map(|s| (0..r).map(move |c| (s, c))).map(|(s, c)| p[(s, c)]));
        let lu = big.lu();
        let y = if lu.is_invertible() && lu_well_posed(&lu) {
            lu.solve(&rhs)
        } else {
            None
        }
        .ok_or(Error::Regularization("dense temporal system"))?;
        return Ok(DMatrix::from_fn(nt, r, |s, c| y[s * r + c]));
    }
    let mut y = DMatrix::zeros(nt, r);
    let mut solver = BlockSolver {
        key: Vec::new(),
        lu: None,
        normal: None,
    };
    let order: Vec<usize> = if lower { (0..nt).collect() } else { (0..nt).rev().collect() };
    let mut key = vec![0.0; temporal.len()];
    for s in order {
        let mut rhs: DVector<f64> = p.row(s).transpose();
        for (j, a) in temporal.iter().enumerate() {
            key[j] = 0.0;
            for (sp, v) in a.row(s) {
                if sp == s {
                    key[j] = v;
                } else {
                    rhs -= &k[j] * y.row(sp).transpose() * v;
                }
            }
        }
        let ys = solver.solve(&key, k, &rhs)?;
        y.set_row(s, &ys.transpose());
    }
    Ok(y)
}

fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = a.clone();
    for mut col in a.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let (u, sigma, _) = sorted_svd(a);
    let max = sigma.first().copied().unwrap_or(0.0);
    let keep = sigma.iter().take_while(|&&s| s > 1e-12 * max && s > 0.0).count().max(1);
    u.columns(0, keep).into_owned()
}

/// Alternating solver for `A x = b` in two-core tensor-train format.
///
/// Each sweep solves the Galerkin system for the spatial core with the
/// temporal core fixed, enriches the spatial basis with leading directions of
/// the residual, solves the Galerkin system for the temporal core,
/// recompresses and enriches the temporal basis for the next sweep. Residual
/// directions are taken after one application of the inverse of the
/// diagonal time block.
pub fn amen_solve(a: &KroneckerOperator, b: &TtVector, opts: &AmenOptions) -> Result<AmenSolution> {
    let (tr, tc) = a.temporal_shape();
    let (sr, sc) = a.spatial_shape();
    if tr != tc || sr != sc {
        return Err(Error::Validation("amen_solve needs square Kronecker factors".into()));
    }
    check_len("right-hand side time points", tr, b.n_time())?;
    check_len("right-hand side spatial dimension", sr, b.n_space())?;

    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(AmenSolution {
            x: TtVector::zeros(tr, sr),
            converged: true,
            sweeps: 0,
            residual: 0.0,
        });
    }
    let temporal: Vec<&CsrMatrix> = a.terms.iter().map(|t| &t.temporal).collect();
    let spatial: Vec<&CsrMatrix> = a.terms.iter().map(|t| &t.spatial).collect();
    let mut pattern = spatial[0].clone();
    for s in &spatial[1..] {
        pattern = pattern.linear_combination(1.0, s, 1.0);
    }
    let ordering = Ordering::rcm(&pattern);
    // one-step operator Σ_j A_j[0,0] B_j, used to precondition enrichment
    let step: Vec<(f64, &CsrMatrix)> = temporal
        .iter()
        .zip(&spatial)
        .map(|(a, &bs)| (a.get(0, 0), bs))
        .collect();
    let precond = SparseLu::factor_combination(&step, &ordering).or_else(|_| SparseLu::factor_combination(&[(1.0, spatial[0])], &ordering))?;

    let b = tt_round(b, 0.0);
    let mut t = {
        let (q, _) = thin_qr(&b.temporal);
        q.columns(0, b.tt_rank().min(q.ncols()).min(opts.max_rank.max(1))).into_owned()
    };
    let mut best: Option<AmenSolution> = None;

    for sweep in 1..=opts.max_sweeps.max(1) {
        // spatial core
        let g: Vec<DMatrix<f64>> = temporal.iter().map(|a| t.transpose() * a.mul_dense(&t)).collect();
        let rhs = &b.spatial * (b.temporal.transpose() * &t);
        let s = spatial_solve(&spatial, &g, &rhs, &ordering)?;

        // spatial enrichment from the residual of the intermediate iterate
        let mid = TtVector {
            temporal: t.clone(),
            spatial: s.clone(),
        };
        let dirs = residual_directions(&temporal, &spatial, &mid, &b, Some(&precond));
        let mid_residual = dirs.norm / b_norm;
        if mid_residual <= opts.tol {
            let x = tt_round_capped(&mid, opts.round_tol, opts.max_rank);
            let residual = relative_residual(a, &x, &b)?;
            log::trace!("amen sweep {sweep}: converged after spatial step, residual {residual:.3e}");
            if residual <= opts.tol {
                best = Some(AmenSolution {
                    x,
                    converged: true,
                    sweeps: sweep,
                    residual,
                });
                break;
            }
        }
        let enrich = dirs.count(opts.enrich_rank);
        let basis = orthonormal_columns(&hcat(&[&s, &dirs.spatial.columns(0, enrich).into_owned()]));

        // temporal core
        let k: Vec<DMatrix<f64>> = spatial.iter().map(|bs| basis.transpose() * bs.mul_dense(&basis)).collect();
        let p = &b.temporal * (b.spatial.transpose() * &basis);
        let y = temporal_solve(&temporal, &k, &p)?;

        let x = tt_round_capped(
            &TtVector {
                temporal: y,
                spatial: basis,
            },
            opts.round_tol,
            opts.max_rank,
        );
        // temporal enrichment for the next sweep
        let dirs = residual_directions(&temporal, &spatial, &x, &b, Some(&precond));
        let residual = dirs.norm / b_norm;
        let enrich = dirs.count(opts.enrich_rank).min(opts.max_rank.saturating_sub(x.tt_rank()));
        t = orthonormal_columns(&hcat(&[&x.temporal, &dirs.temporal.columns(0, enrich).into_owned()]));
        log::trace!("amen sweep {sweep}: rank {}, residual {residual:.3e}", x.tt_rank());
        let converged = residual <= opts.tol;
        if best.as_ref().is_none_or(|bst| residual < bst.residual) {
            best = Some(AmenSolution {
                x,
                converged,
                sweeps: sweep,
                residual,
            });
        }
        if converged {
            break;
        }
    }
    let mut out = best.expect("at least one sweep");
    out.sweeps = out.sweeps.max(1);
    if !out.converged {
        log::warn!(
            "tensor-train solver stopped after {} sweeps with relative residual {:.3e}",
            opts.max_sweeps,
            out.residual
        );
    }
    Ok(out)
}

/// Aggregated solver statistics of a [`TtForwardMap`].
#[derive(Debug, Default)]
pub struct TtStats {
    solves: AtomicUsize,
    sweeps: AtomicUsize,
    max_rank: AtomicUsize,
    unconverged: AtomicUsize,
    max_residual_bits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtStatsSnapshot {
    pub solves: usize,
    pub sweeps: usize,
    pub max_rank: usize,
    pub unconverged: usize,
    pub max_residual: f64,
}

impl TtStats {
    fn record(&self, sol: &AmenSolution) {
        self.solves.fetch_add(1, AtomicOrdering::Relaxed);
        self.sweeps.fetch_add(sol.sweeps, AtomicOrdering::Relaxed);
        self.max_rank.fetch_max(sol.x.tt_rank(), AtomicOrdering::Relaxed);
        if !sol.converged {
            self.unconverged.fetch_add(1, AtomicOrdering::Relaxed);
        }
        // nonnegative f64 bit patterns order like the values
        self.max_residual_bits
            .fetch_max(sol.residual.max(0.0).to_bits(), AtomicOrdering::Relaxed);
    }

    pub fn snapshot(&self) -> TtStatsSnapshot {
        TtStatsSnapshot {
            solves: self.solves.load(AtomicOrdering::Relaxed),
            sweeps: self.sweeps.load(AtomicOrdering::Relaxed),
            max_rank: self.max_rank.load(AtomicOrdering::Relaxed),
            unconverged: self.unconverged.load(AtomicOrdering::Relaxed),
            max_residual: f64::from_bits(self.max_residual_bits.load(AtomicOrdering::Relaxed)),
        }
    }
}

/// Matrix-free `F = 𝒞 𝒦⁻¹ ℳ₀` and its transpose via tensor-train solves.
#[derive(Debug)]
pub struct TtForwardMap<'a> {
    sys: &'a StateSpaceSystem,
    grid: TimeGrid,
    opts: AmenOptions,
    forward: KroneckerOperator,
    backward: KroneckerOperator,
    lift: CsrMatrix,
    lift_t: CsrMatrix,
    stats: TtStats,
}

impl<'a> TtForwardMap<'a> {
    pub fn new(sys: &'a StateSpaceSystem, grid: &TimeGrid, opts: AmenOptions) -> Self {
        let forward = KroneckerOperator::all_at_once(sys, grid);
        let backward = forward.transpose();
        let lift = sys.m_phys.linear_combination(1.0, &sys.k_phys, grid.dt);
        let lift_t = lift.transpose();
        Self {
            sys,
            grid: *grid,
            opts,
            forward,
            backward,
            lift,
            lift_t,
            stats: TtStats::default(),
        }
    }

    pub fn options(&self) -> &AmenOptions {
        &self.opts
    }

    pub fn stats(&self) -> TtStatsSnapshot {
        self.stats.snapshot()
    }

    /// Space-time trajectory `𝒦⁻¹ ℳ₀ (e₀ ⊗ v)` in TT format.
    pub fn trajectory(&self, v: &[f64]) -> Result<AmenSolution> {
        check_len("parameter vector", self.sys.n_x, v.len())?;
        let mut e0 = vec![0.0; self.grid.n_points()];
        e0[0] = 1.0;
        let b = TtVector::rank1(&e0, &self.lift.apply(v));
        let sol = amen_solve(&self.forward, &b, &self.opts)?;
        self.stats.record(&sol);
        Ok(sol)
    }

    /// `F v`, stacked time-major.
    pub fn matvec_f(&self, v: &[f64]) -> Result<Vec<f64>> {
        let sol = self.trajectory(v)?;
        let cs = self.sys.c.mul_dense(&sol.x.spatial);
        let y = cs * sol.x.temporal.transpose(); // n_y × N_t
        Ok(y.as_slice().to_vec())
    }

    /// `Fᵀ w = ℳ₀ᵀ 𝒦⁻ᵀ 𝒞ᵀ w` restricted to the initial time block.
    pub fn rmatvec_ft(&self, w: &[f64]) -> Result<Vec<f64>> {
        let (nt, ny) = (self.grid.n_points(), self.sys.n_y);
        check_len("observation vector", nt * ny, w.len())?;
        if w.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; self.sys.n_x]);
        }
        // 𝒞ᵀw = Σ_j w_{·,j} ⊗ C_{j,·}ᵀ
        let temporal = DMatrix::from_fn(nt, ny, |s, j| w[s * ny + j]);
        let spatial = self.sys.c.transpose().to_dense();
        let b = TtVector::new(temporal, spatial)?;
        let sol = amen_solve(&self.backward, &b, &self.opts)?;
        self.stats.record(&sol);
        Ok(self.lift_t.apply(&sol.x.time_slice(0)))
    }
}

impl ParameterToObservable for TtForwardMap<'_> {
    fn n_params(&self) -> usize {
        self.sys.n_x
    }

    fn n_obs(&self) -> usize {
        self.grid.n_points() * self.sys.n_y
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec_f(v)
    }

    fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.rmatvec_ft(w)
    }
}

pub fn tt_matvec_f(sys: &StateSpaceSystem, grid: &TimeGrid, v: &[f64], opts: &AmenOptions) -> Result<Vec<f64>> {
    TtForwardMap::new(sys, grid, *opts).matvec_f(v)
}

pub fn tt_rmatvec_ft(sys: &StateSpaceSystem, grid: &TimeGrid, w: &[f64], opts: &AmenOptions) -> Result<Vec<f64>> {
    TtForwardMap::new(sys, grid, *opts).rmatvec_ft(w)
}

/// `Γ^{T/2} Fᵀ Γ_noise⁻¹ F Γ^{1/2} v` for any representation of `F`.
pub fn misfit_apply<F: ParameterToObservable + ?Sized>(
    f: &F,
    prior: &PriorModel,
    noise: &NoiseModel,
    v: &[f64],
) -> Result<Vec<f64>> {
    let p = prior.apply_sqrt(v);
    let y = f.apply(&p)?;
    let w = noise.apply_noise_inverse(&y)?;
    let z = f.apply_transpose(&w)?;
    Ok(prior.apply_sqrt_transposed(&z))
}

pub fn misfit_apply_tt(
    sys: &StateSpaceSystem,
    grid: &TimeGrid,
    prior: &PriorModel,
    noise: &NoiseModel,
    v: &[f64],
    opts: &AmenOptions,
) -> Result<Vec<f64>> {
    misfit_apply(&TtForwardMap::new(sys, grid, *opts), prior, noise, v)
}
