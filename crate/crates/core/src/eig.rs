//! Leading eigenpairs of symmetric-definite pencils `H v = λ B v` by a
//! thick-restart Lanczos iteration in the `B`-inner product.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::noise::NoiseModel;
use crate::prior::PriorModel;
use crate::sens::ParameterToObservable;
use crate::sparse::{axpy, dot};
use crate::tt::misfit_apply;

/// Matrix-free symmetric pencil `(H, B)` with `B` positive definite.
pub trait Pencil {
    fn dim(&self) -> usize;
    fn apply_h(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_b(&self, x: &[f64]) -> Vec<f64>;
    fn solve_b(&self, x: &[f64]) -> Vec<f64>;
    /// Upper bound on the rank of `H`.
    fn rank_bound(&self) -> usize {
        self.dim()
    }
}

/// Inner product in which the eigenvectors are orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// `H_misfit v = λ Γ_prior⁻¹ v`
    PriorInner,
    /// `Γ^{T/2} H_misfit Γ^{1/2} v̂ = λ M v̂`
    MassInner,
}

impl Formulation {
    pub fn name(&self) -> &'static str {
        match self {
            Formulation::PriorInner => "prior_inner",
            Formulation::MassInner => "mass_inner",
        }
    }
}

/// Representation of the parameter-to-observable map used for `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Direct,
    Tensor,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Direct => "direct",
            Backend::Tensor => "tensor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigOptions {
    pub rank: usize,
    /// residual tolerance relative to the largest eigenvalue
    pub tol: f64,
    pub max_restarts: usize,
    /// seed for the random vectors used after a breakdown
    pub seed: u64,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            rank: 50,
            tol: 1e-10,
            max_restarts: 200,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralApproximation {
    /// descending
    pub eigenvalues: Vec<f64>,
    /// `n_x × r`, `B`-orthonormal columns
    pub eigenvectors: DMatrix<f64>,
    pub formulation: Formulation,
    pub backend: Backend,
    pub converged: bool,
    /// `‖H v − λ B v‖_{B⁻¹}` per pair
    pub residuals: Vec<f64>,
    pub h_applications: usize,
    pub restarts: usize,
}

impl SpectralApproximation {
    pub fn eigen_rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// The leading `r` pairs.
    pub fn truncated(&self, r: usize) -> Self {
        let r = r.min(self.eigen_rank());
        Self {
            eigenvalues: self.eigenvalues[..r].to_vec(),
            eigenvectors: self.eigenvectors.columns(0, r).into_owned(),
            residuals: self.residuals[..r].to_vec(),
            ..self.clone()
        }
    }
}

struct Basis {
    q: Vec<Vec<f64>>,
    bq: Vec<Vec<f64>>,
    hq: Vec<Vec<f64>>,
}

impl Basis {
    /// Removes the `B`-components along the basis, twice.
    fn orthogonalize(&self, w: &mut [f64]) {
        for _ in 0..2 {
            for (q, bq) in self.q.iter().zip(&self.bq) {
                let c = dot(bq, w);
                axpy(-c, q, w);
            }
        }
    }
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        .collect()
}

/// Normalizes `w` against the basis; returns `false` if nothing is left.
fn push_vector<P: Pencil + ?Sized>(pencil: &P, basis: &mut Basis, mut w: Vec<f64>, reference: f64) -> bool {
    basis.orthogonalize(&mut w);
    let bw = pencil.apply_b(&w);
    let norm_sq = dot(&w, &bw);
    if !(norm_sq > 0.0) || libm::sqrt(norm_sq) <= 1e-10 * reference {
        return false;
    }
    let inv = 1.0 / libm::sqrt(norm_sq);
    basis.q.push(w.iter().map(|v| v * inv).collect());
    basis.bq.push(bw.iter().map(|v| v * inv).collect());
    true
}

/// Computes the `opts.rank` largest eigenpairs of `(H, B)`.
///
/// The rank is clipped to the pencil's rank bound with a warning. Residuals
/// are measured in the `B⁻¹`-norm and compared against `tol · λ₁`.
pub fn leading_eigenpairs<P: Pencil + ?Sized>(
    pencil: &P,
    opts: &EigOptions,
    formulation: Formulation,
    backend: Backend,
) -> Result<SpectralApproximation> {
    let n = pencil.dim();
    let bound = pencil.rank_bound().min(n);
    let mut r = opts.rank;
    if r > bound {
        log::warn!("requested rank {r} exceeds the rank bound {bound}; using {bound}");
        r = bound;
    }
    if r == 0 {
        return Ok(SpectralApproximation {
            eigenvalues: Vec::new(),
            eigenvectors: DMatrix::zeros(n, 0),
            formulation,
            backend,
            converged: true,
            residuals: Vec::new(),
            h_applications: 0,
            restarts: 0,
        });
    }
    let m = (2 * r + 10).min(n);
    let keep = (r + (m - r) / 2).min(m.saturating_sub(1)).max(r.min(m));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis = Basis {
        q: Vec::with_capacity(m + 1),
        bq: Vec::with_capacity(m + 1),
        hq: Vec::with_capacity(m + 1),
    };
    let mut h_applications = 0usize;

    let ones = vec![1.0; n];
    if !push_vector(pencil, &mut basis, ones, 0.0) {
        let start = random_vector(&mut rng, n);
        push_vector(pencil, &mut basis, start, 0.0);
    }

    let mut restarts = 0;
    loop {
        // expand to m vectors
        let mut exhausted = false;
        loop {
            while basis.hq.len() < basis.q.len() {
                let hq = pencil.apply_h(&basis.q[basis.hq.len()])?;
                h_applications += 1;
                basis.hq.push(hq);
            }
            if basis.q.len() >= m || exhausted {
                break;
            }
            let last = basis.hq.last().unwrap();
            let w = pencil.solve_b(last);
            let reference = libm::sqrt(dot(&w, last).abs());
            if !push_vector(pencil, &mut basis, w, reference) {
                // invariant subspace: continue with a random direction
                let mut added = false;
                for _ in 0..3 {
                    let w = random_vector(&mut rng, n);
                    let scale = libm::sqrt(dot(&w, &pencil.apply_b(&w)));
                    if push_vector(pencil, &mut basis, w, scale) {
                        added = true;
                        break;
                    }
                }
                exhausted = !added;
            }
        }

        // Rayleigh–Ritz on T = Qᵀ H Q
        let k = basis.q.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                t[(i, j)] = dot(&basis.q[i], &basis.hq[j]);
            }
        }
        let t = (&t + t.transpose()) * 0.5;
        let eig = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let n_out = r.min(k);
        let n_keep = keep.min(k);

        let combine = |vecs: &[Vec<f64>], col: usize| {
            let mut out = vec![0.0; n];
            for (i, v) in vecs.iter().enumerate() {
                axpy(eig.eigenvectors[(i, col)], v, &mut out);
            }
            out
        };
        let mut ritz = Vec::with_capacity(n_keep);
        let mut residuals = Vec::with_capacity(n_out);
        let theta_max = eig.eigenvalues[order[0]];
        let threshold = opts.tol * theta_max.abs().max(f64::MIN_POSITIVE);
        let mut converged = true;
        for (idx, &col) in order.iter().take(n_keep).enumerate() {
            let theta = eig.eigenvalues[col];
            let u = combine(&basis.q, col);
            let hu = combine(&basis.hq, col);
            let bu = combine(&basis.bq, col);
            if idx < n_out {
                let mut res = hu.clone();
                axpy(-theta, &bu, &mut res);
                let res_norm = libm::sqrt(dot(&res, &pencil.solve_b(&res)).max(0.0));
                converged &= res_norm <= threshold;
                residuals.push(res_norm);
            }
            ritz.push((theta, u, bu, hu));
        }
        if k < n_out {
            converged = false;
        }

        if converged || exhausted || k >= n || restarts >= opts.max_restarts {
            let converged = converged || k >= n;
            if !converged {
                log::warn!(
                    "eigensolver stopped after {restarts} restarts; largest residual {:.3e} (threshold {threshold:.3e})",
                    residuals.iter().fold(0.0f64, |m, v| m.max(*v))
                );
            }
            let mut vectors = DMatrix::zeros(n, n_out);
            let mut values = Vec::with_capacity(n_out);
            for (c, (theta, u, _, _)) in ritz.iter().take(n_out).enumerate() {
                values.push(*theta);
                vectors.set_column(c, &nalgebra::DVector::from_column_slice(u));
            }
            return Ok(SpectralApproximation {
                eigenvalues: values,
                eigenvectors: vectors,
                formulation,
                backend,
                converged,
                residuals,
                h_applications,
                restarts,
            });
        }

        // thick restart: Ritz vectors plus the continuation direction
        restarts += 1;
        let last_h = basis.hq.last().unwrap().clone();
        let mut next = pencil.solve_b(&last_h);
        let reference = libm::sqrt(dot(&next, &last_h).abs());
        basis.orthogonalize(&mut next);
        basis.q.clear();
        basis.bq.clear();
        basis.hq.clear();
        for (_, u, bu, hu) in ritz {
            basis.q.push(u);
            basis.bq.push(bu);
            basis.hq.push(hu);
        }
        basis.orthogonalize(&mut next);
        // the stored H-images belong to the Ritz vectors; only the new
        // direction needs an application
        let hq = core::mem::take(&mut basis.hq);
        let pushed = push_vector(pencil, &mut basis, next, reference);
        basis.hq = hq;
        if !pushed {
            let w = random_vector(&mut rng, n);
            let scale = libm::sqrt(dot(&w, &pencil.apply_b(&w)));
            push_vector(pencil, &mut basis, w, scale);
        }
    }
}

/// `H = Fᵀ Γ_noise⁻¹ F` with `B = Γ_prior⁻¹`.
pub struct PriorInnerPencil<'a, F: ?Sized> {
    pub map: &'a F,
    pub prior: &'a PriorModel,
    pub noise: &'a NoiseModel,
}

impl<F: ParameterToObservable + ?Sized> Pencil for PriorInnerPencil<'_, F> {
    fn dim(&self) -> usize {
        self.map.n_params()
    }

    fn apply_h(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.map.apply(x)?;
        self.map.apply_transpose(&self.noise.apply_noise_inverse(&y)?)
    }

    fn apply_b(&self, x: &[f64]) -> Vec<f64> {
        self.prior.apply_prior_inverse(x)
    }

    fn solve_b(&self, x: &[f64]) -> Vec<f64> {
        self.prior.apply_prior(x)
    }

    fn rank_bound(&self) -> usize {
        self.map.n_obs().min(self.map.n_params())
    }
}

/// `H = Γ^{T/2} Fᵀ Γ_noise⁻¹ F Γ^{1/2}` with `B = M`.
pub struct MassInnerPencil<'a, F: ?Sized> {
    pub map: &'a F,
    pub prior: &'a PriorModel,
    pub noise: &'a NoiseModel,
}

impl<F: ParameterToObservable + ?Sized> Pencil for MassInnerPencil<'_, F> {
    fn dim(&self) -> usize {
        self.map.n_params()
    }

    fn apply_h(&self, x: &[f64]) -> Result<Vec<f64>> {
        misfit_apply(self.map, self.prior, self.noise, x)
    }

    fn apply_b(&self, x: &[f64]) -> Vec<f64> {
        self.prior.apply_mass(x)
    }

    fn solve_b(&self, x: &[f64]) -> Vec<f64> {
        self.prior.solve_mass(x)
    }

    fn rank_bound(&self) -> usize {
        self.map.n_obs().min(self.map.n_params())
    }
}

/// Eigenpairs of the prior-preconditioned misfit Hessian in the requested
/// formulation.
pub fn misfit_eigenpairs<F: ParameterToObservable + ?Sized>(
    map: &F,
    prior: &PriorModel,
    noise: &NoiseModel,
    formulation: Formulation,
    backend: Backend,
    opts: &EigOptions,
) -> Result<SpectralApproximation> {
    match formulation {
        Formulation::PriorInner => leading_eigenpairs(&PriorInnerPencil { map, prior, noise }, opts, formulation, backend),
        Formulation::MassInner => leading_eigenpairs(&MassInnerPencil { map, prior, noise }, opts, formulation, backend),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::femkit::{assemble, build_coupled_geometry, CouplingSpec, Face, GeometryConfig, MaterialPart, PartSpec, SensorSpec};
    use crate::forward::TimeGrid;
    use crate::sens::assemble_f;

    struct DensePencil {
        h: DMatrix<f64>,
        b: DMatrix<f64>,
    }

    impl Pencil for DensePencil {
        fn dim(&self) -> usize {
            self.h.nrows()
        }
        fn apply_h(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok((&self.h * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec())
        }
        fn apply_b(&self, x: &[f64]) -> Vec<f64> {
            (&self.b * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
        }
        fn solve_b(&self, x: &[f64]) -> Vec<f64> {
            self.b.clone().lu().solve(&nalgebra::DVector::from_column_slice(x)).unwrap().as_slice().to_vec()
        }
    }

    fn solve(p: &DensePencil, r: usize) -> SpectralApproximation {
        let opts = EigOptions { rank: r, ..Default::default() };
        leading_eigenpairs(p, &opts, Formulation::MassInner, Backend::Direct).unwrap()
    }

    #[test]
    fn diagonal_pencil() {
        let p = DensePencil {
            h: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0])),
            b: DMatrix::identity(3, 3),
        };
        let s = solve(&p, 2);
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-12 && (s.eigenvalues[1] - 2.0).abs() < 1e-12);
        assert!((s.eigenvectors[(0, 0)].abs() - 1.0).abs() < 1e-10);
        assert!((s.eigenvectors[(1, 1)].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_operator() {
        let p = DensePencil {
            h: DMatrix::zeros(6, 6),
            b: DMatrix::identity(6, 6) * 2.0,
        };
        let s = solve(&p, 3);
        assert!(s.converged);
        assert!(s.eigenvalues.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn restarted_generalized_problem_matches_dense() {
        let n = 80;
        // slowly decaying spectrum in a rotated basis forces restarts
        let rot = DMatrix::from_fn(n, n, |i, j| libm::sin((i * j + 1) as f64 * 0.37) + if i == j { 2.0 } else { 0.0 })
            .qr()
            .q();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| 1.0 / (1.0 + 0.02 * i as f64)));
        let h = &rot * d * rot.transpose();
        let b = DMatrix::from_fn(n, n, |i, j| match (i as i64 - j as i64).abs() {
            0 => 4.0,
            1 => 1.0,
            _ => 0.0,
        });
        let p = DensePencil { h: h.clone(), b: b.clone() };
        let s = solve(&p, 8);
        assert!(s.converged);
        assert!(s.restarts > 0);

        let l = b.clone().cholesky().unwrap().l();
        let linv = l.clone().try_inverse().unwrap();
        let mut expected: Vec<f64> = (&linv * &h * linv.transpose()).symmetric_eigen().eigenvalues.iter().copied().collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (a, e) in s.eigenvalues.iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-8 * expected[0], "{a} vs {e}");
        }
        let vtbv = s.eigenvectors.transpose() * &b * &s.eigenvectors;
        assert!((vtbv - DMatrix::identity(8, 8)).amax() < 1e-8);
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    fn coupled_system() -> (crate::femkit::StateSpaceSystem, Vec<MaterialPart>) {
        let mats = vec![
            MaterialPart { id: 0, rho: 7850.0, cp: 460.0, lambda: 50.0 },
            MaterialPart { id: 1, rho: 2700.0, cp: 900.0, lambda: 200.0 },
        ];
        let spec = GeometryConfig {
            parts: vec![
                PartSpec { material: mats[0], lower: vec![0.0], upper: vec![0.2], elements: vec![12] },
                PartSpec { material: mats[1], lower: vec![0.2], upper: vec![0.4], elements: vec![12] },
            ],
            couplings: vec![CouplingSpec {
                part_a: 0,
                face_a: Face::parse("x+").unwrap(),
                part_b: 1,
                face_b: Face::parse("x-").unwrap(),
                alpha: 500.0,
            }],
            sensors: vec![SensorSpec { part: 0, point: vec![0.05] }, SensorSpec { part: 1, point: vec![0.33] }],
            ..Default::default()
        };
        (assemble(&build_coupled_geometry(&spec).unwrap()).unwrap(), mats)
    }

    #[test]
    fn formulations_share_eigenvalues() {
        let (sys, mats) = coupled_system();
        let grid = TimeGrid::new(6, 60.0).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &mats, 1800.0, 3.0).unwrap();
        let noise = NoiseModel::new(0.1, f.rows()).unwrap();
        let opts = EigOptions { rank: 6, ..Default::default() };
        let a = misfit_eigenpairs(&f, &prior, &noise, Formulation::PriorInner, Backend::Direct, &opts).unwrap();
        let b = misfit_eigenpairs(&f, &prior, &noise, Formulation::MassInner, Backend::Direct, &opts).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() <= 1e-8 * x.abs(), "{x} vs {y}");
        }

        // dense oracle of the prior_inner pencil
        let fd = f.to_dense();
        let h = fd.transpose() * &fd * noise.precision();
        let a_h = prior.a_h_dense();
        let binv_mat = &a_h * sys.m_unit.to_dense().try_inverse().unwrap() * &a_h;
        let l = binv_mat.clone().cholesky().unwrap().l();
        let linv = l.try_inverse().unwrap();
        let mut expected: Vec<f64> = (&linv * h * linv.transpose()).symmetric_eigen().eigenvalues.iter().copied().collect();
        expected.sort_by(|x, y| y.total_cmp(x));
        for (x, e) in a.eigenvalues.iter().zip(&expected) {
            assert!((x - e).abs() <= 1e-8 * e.abs(), "{x} vs {e}");
        }

        // v̂ = Γ^{-1/2} v, i.e. v = Γ^{1/2} v̂ up to sign
        for c in 0..3 {
            let vhat: Vec<f64> = b.eigenvectors.column(c).iter().copied().collect();
            let mapped = prior.apply_sqrt(&vhat);
            let v: Vec<f64> = a.eigenvectors.column(c).iter().copied().collect();
            let sign = if dot(&mapped, &v) < 0.0 { -1.0 } else { 1.0 };
            let err: f64 = mapped.iter().zip(&v).map(|(x, y)| (sign * x - y).abs()).fold(0.0, f64::max);
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err <= 1e-6 * scale, "eigenvector {c}: {err}");
        }
    }

    #[test]
    fn rank_is_clipped_to_bound() {
        let (sys, mats) = coupled_system();
        let grid = TimeGrid::new(1, 60.0).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &mats, 1800.0, 3.0).unwrap();
        let noise = NoiseModel::new(0.1, f.rows()).unwrap();
        let opts = EigOptions { rank: 10, ..Default::default() };
        let s = misfit_eigenpairs(&f, &prior, &noise, Formulation::MassInner, Backend::Direct, &opts).unwrap();
        assert_eq!(s.eigen_rank(), 4);
    }
}
