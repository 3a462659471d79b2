//! Posterior variances from a low-rank spectral approximation, the dense
//! posterior covariance oracle, the MAP point and field comparisons.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::eig::{Backend, Formulation, SpectralApproximation};
use crate::error::{check_len, Error, Result};
use crate::noise::NoiseModel;
use crate::prior::PriorModel;
use crate::sens::ParameterToObservable;
use crate::sparse::{axpy, dot};

/// Largest `n_x` accepted by [`dense_oracle_posterior`].
pub const DENSE_ORACLE_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMetadata {
    pub formulation: Option<Formulation>,
    pub backend: Option<Backend>,
    pub eigen_rank: usize,
    pub eig_tol: Option<f64>,
    pub amen_tol: Option<f64>,
    /// number of nodal values clamped from below to zero
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceField {
    /// nodal variances [K²]
    pub values: Vec<f64>,
    pub metadata: VarianceMetadata,
}

impl VarianceField {
    pub fn with_tolerances(mut self, eig_tol: Option<f64>, amen_tol: Option<f64>) -> Self {
        self.metadata.eig_tol = eig_tol;
        self.metadata.amen_tol = amen_tol;
        self
    }
}

/// `var_k = e_kᵀ Γ_prior e_k − Σ_i λ̃_i (e_kᵀ w_i)²` with `λ̃ = λ/(λ+1)` and
/// `w_i = v_i` (prior inner product) or `w_i = Γ^{1/2} v̂_i` (mass inner
/// product).
///
/// `path` names the formulation the caller evaluates; it must match the
/// formulation the eigenpairs were computed in.
pub fn posterior_variance(
    spec: &SpectralApproximation,
    prior: &PriorModel,
    prior_diag: &[f64],
    path: Formulation,
) -> Result<VarianceField> {
    if spec.formulation != path {
        return Err(Error::Contract(format!(
            "eigenpairs computed in the {} formulation cannot be evaluated as {}",
            spec.formulation.name(),
            path.name()
        )));
    }
    let n = prior_diag.len();
    check_len("prior variance diagonal", prior.dim(), n)?;
    check_len("eigenvector length", n, spec.eigenvectors.nrows())?;

    let mut values = prior_diag.to_vec();
    for (i, &lambda) in spec.eigenvalues.iter().enumerate() {
        let lambda = lambda.max(0.0);
        let weight = lambda / (lambda + 1.0);
        let v: Vec<f64> = spec.eigenvectors.column(i).iter().copied().collect();
        let w = match path {
            Formulation::PriorInner => v,
            Formulation::MassInner => prior.apply_sqrt(&v),
        };
        for (val, wk) in values.iter_mut().zip(&w) {
            *val -= weight * wk * wk;
        }
    }
    let clamped = clamp_negative(&mut values);
    Ok(VarianceField {
        values,
        metadata: VarianceMetadata {
            formulation: Some(spec.formulation),
            backend: Some(spec.backend),
            eigen_rank: spec.eigen_rank(),
            eig_tol: None,
            amen_tol: None,
            clamped,
        },
    })
}

fn clamp_negative(values: &mut [f64]) -> usize {
    let mut clamped = 0;
    let mut worst = 0.0f64;
    for v in values.iter_mut() {
        if *v < 0.0 {
            worst = worst.min(*v);
            *v = 0.0;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} negative posterior variances to zero (most negative {worst:.3e})");
    }
    clamped
}

/// `Γ_post = (Fᵀ Γ_noise⁻¹ F + Γ_prior⁻¹)⁻¹` by dense factorization.
pub fn dense_oracle_posterior(f: &DMatrix<f64>, noise: &NoiseModel, prior: &PriorModel) -> Result<DMatrix<f64>> {
    let n = prior.dim();
    if n > DENSE_ORACLE_LIMIT {
        return Err(Error::SizeGuard {
            n,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    check_len("sensitivity columns", n, f.ncols())?;
    check_len("sensitivity rows", noise.dim, f.nrows())?;
    let a = prior.a_h_dense();
    let mut m_inv_a = DMatrix::zeros(n, n);
    for c in 0..n {
        let col: Vec<f64> = a.column(c).iter().copied().collect();
        m_inv_a.set_column(c, &nalgebra::DVector::from_vec(prior.solve_mass(&col)));
    }
    let prior_inv = &a * m_inv_a;
    let hessian = f.transpose() * f * noise.precision() + prior_inv;
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let chol = hessian
        .cholesky()
        .ok_or_else(|| Error::Contract("posterior Hessian is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub point: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// final preconditioned residual relative to the initial one
    pub residual: f64,
}

/// MAP point of the linear Gaussian problem by preconditioned conjugate
/// gradients on `(H_misfit + Γ_prior⁻¹) δ = Fᵀ Γ_noise⁻¹ (y − f0 − ē − F p̄)`,
/// preconditioned with `Γ_prior`.
pub fn map_point<F: ParameterToObservable + ?Sized>(
    f: &F,
    f0: &[f64],
    prior: &PriorModel,
    noise: &NoiseModel,
    data: &[f64],
) -> Result<MapEstimate> {
    map_point_with(f, f0, prior, noise, data, 1e-10, 10 * prior.dim() + 100)
}

pub fn map_point_with<F: ParameterToObservable + ?Sized>(
    f: &F,
    f0: &[f64],
    prior: &PriorModel,
    noise: &NoiseModel,
    data: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<MapEstimate> {
    let n = prior.dim();
    check_len("observation data", f.n_obs(), data.len())?;
    check_len("observation offset", f.n_obs(), f0.len())?;
    check_len("parameter dimension", n, f.n_params())?;
    let f_mean = f.apply(&prior.mean)?;
    let misfit: Vec<f64> = (0..data.len())
        .map(|i| data[i] - f0[i] - noise.mean - f_mean[i])
        .collect();
    let mut r = f.apply_transpose(&noise.apply_noise_inverse(&misfit)?)?;
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let mut out = f.apply_transpose(&noise.apply_noise_inverse(&f.apply(x)?)?)?;
        axpy(1.0, &prior.apply_prior_inverse(x), &mut out);
        Ok(out)
    };
    let mut delta = vec![0.0; n];
    let mut z = prior.apply_prior(&r);
    let mut rz = dot(&r, &z);
    let rz0 = rz;
    let mut iterations = 0;
    let mut converged = rz0 <= 0.0;
    let mut p = z.clone();
    while !converged && iterations < max_iter {
        iterations += 1;
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut delta);
        axpy(-alpha, &ap, &mut r);
        z = prior.apply_prior(&r);
        let rz_new = dot(&r, &z);
        if libm::sqrt(rz_new.max(0.0) / rz0) <= tol {
            rz = rz_new;
            converged = true;
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    if !converged {
        log::warn!("MAP conjugate gradients stopped after {iterations} iterations");
    }
    let point = prior.mean.iter().zip(&delta).map(|(m, d)| m + d).collect();
    Ok(MapEstimate {
        point,
        converged,
        iterations,
        residual: if rz0 > 0.0 { libm::sqrt(rz.max(0.0) / rz0) } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldComparison {
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Node-wise differences of `v1` relative to the reference `v2`.
pub fn compare_fields(v1: &[f64], v2: &[f64]) -> Result<FieldComparison> {
    check_len("field length", v2.len(), v1.len())?;
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0;
    let mut max_rel = 0.0f64;
    for (a, b) in v1.iter().zip(v2) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
        max_rel = max_rel.max(d / b.abs().max(1e-14));
    }
    Ok(FieldComparison {
        max_abs_diff: max_abs,
        mean_abs_diff: if v1.is_empty() { 0.0 } else { sum_abs / v1.len() as f64 },
        max_rel_diff: max_rel,
    })
}

/// Node-wise difference field `v1 − v2`.
pub fn difference_field(v1: &[f64], v2: &[f64]) -> Result<Vec<f64>> {
    check_len("field length", v2.len(), v1.len())?;
    Ok(v1.iter().zip(v2).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::{misfit_eigenpairs, EigOptions};
    use crate::femkit::{
        assemble, build_coupled_geometry, CouplingSpec, Face, GeometryConfig, MaterialPart, PartSpec, SensorSpec,
        StateSpaceSystem,
    };
    use crate::forward::{observation_offset, InputSignal, TimeGrid};
    use crate::sens::{assemble_f, SensitivityBundle};
    use crate::sparse::CsrMatrix;
    use crate::tt::{AmenOptions, TtForwardMap};

    fn one_dof() -> StateSpaceSystem {
        let d = |v: f64| CsrMatrix::from_diagonal(&[v]);
        StateSpaceSystem::from_matrices(vec![0, 1], d(1.0), d(1.0), d(1.0), d(0.0), CsrMatrix::zeros(1, 0), d(1.0)).unwrap()
    }

    fn spectral(values: Vec<f64>, vectors: DMatrix<f64>, formulation: Formulation) -> SpectralApproximation {
        SpectralApproximation {
            residuals: vec![0.0; values.len()],
            eigenvalues: values,
            eigenvectors: vectors,
            formulation,
            backend: Backend::Direct,
            converged: true,
            h_applications: 0,
            restarts: 0,
        }
    }

    fn two_part(n_el: usize) -> (StateSpaceSystem, Vec<MaterialPart>) {
        let mats = vec![
            MaterialPart { id: 0, rho: 7850.0, cp: 460.0, lambda: 50.0 },
            MaterialPart { id: 1, rho: 2700.0, cp: 900.0, lambda: 200.0 },
        ];
        let spec = GeometryConfig {
            parts: vec![
                PartSpec { material: mats[0], lower: vec![0.0], upper: vec![0.1], elements: vec![n_el] },
                PartSpec { material: mats[1], lower: vec![0.1], upper: vec![0.2], elements: vec![n_el] },
            ],
            couplings: vec![CouplingSpec {
                part_a: 0,
                face_a: Face::parse("x+").unwrap(),
                part_b: 1,
                face_b: Face::parse("x-").unwrap(),
                alpha: 500.0,
            }],
            sensors: vec![SensorSpec { part: 0, point: vec![0.02] }, SensorSpec { part: 1, point: vec![0.17] }],
            ..Default::default()
        };
        (assemble(&build_coupled_geometry(&spec).unwrap()).unwrap(), mats)
    }

    #[test]
    fn empty_update_returns_prior() {
        let sys = one_dof();
        let prior = PriorModel::from_coefficients(&sys, &[1.0], &[1.0]).unwrap();
        let spec = spectral(vec![], DMatrix::zeros(1, 0), Formulation::PriorInner);
        let v = posterior_variance(&spec, &prior, &[0.7], Formulation::PriorInner).unwrap();
        assert_eq!(v.values, vec![0.7]);
    }

    #[test]
    fn single_pair_halves_variance() {
        let d = |v: f64| CsrMatrix::from_diagonal(&[v, v]);
        let sys = StateSpaceSystem::from_matrices(vec![0, 2], d(1.0), d(1.0), d(1.0), d(0.0), CsrMatrix::zeros(2, 0), d(1.0))
            .unwrap();
        let prior = PriorModel::from_coefficients(&sys, &[1.0], &[1.0]).unwrap();
        let spec = spectral(vec![1.0], DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), Formulation::PriorInner);
        let v = posterior_variance(&spec, &prior, &[1.0, 1.0], Formulation::PriorInner).unwrap();
        assert_eq!(v.values, vec![0.5, 1.0]);
        assert!(matches!(
            posterior_variance(&spec, &prior, &[1.0, 1.0], Formulation::MassInner),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scalar_bayes_update() {
        let sys = one_dof();
        // A = 1, M = 1 → Γ_prior = 1
        let prior = PriorModel::from_coefficients(&sys, &[1.0], &[1.0]).unwrap();
        let noise = NoiseModel::new(1.0, 1).unwrap();
        let post = dense_oracle_posterior(&DMatrix::from_element(1, 1, 1.0), &noise, &prior).unwrap();
        assert!((post[(0, 0)] - 0.5).abs() < 1e-15);
        let none = dense_oracle_posterior(&DMatrix::zeros(1, 1), &noise, &prior).unwrap();
        assert!((none[(0, 0)] - 1.0).abs() < 1e-15);

        // low-rank path: λ = σ⁻² F² γ = 1 → γ_post = 1/2
        let mut f = SensitivityBundle::zeros(1, 1, 1).unwrap();
        f.row_mut(0)[0] = 1.0;
        for form in [Formulation::PriorInner, Formulation::MassInner] {
            let s = misfit_eigenpairs(&f, &prior, &noise, form, Backend::Direct, &EigOptions { rank: 1, ..Default::default() })
                .unwrap();
            let v = posterior_variance(&s, &prior, &prior.prior_variance_diag(), form).unwrap();
            assert!((v.values[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_is_spd() {
        let (sys, mats) = two_part(5);
        let grid = TimeGrid::new(3, 60.0).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &mats, 1800.0, 3.0).unwrap();
        let noise = NoiseModel::new(0.1, f.rows()).unwrap();
        let post = dense_oracle_posterior(&f.to_dense(), &noise, &prior).unwrap();
        assert_eq!(post, post.transpose());
        assert!(post.clone().cholesky().is_some());
    }

    #[test]
    fn full_rank_matches_oracle_in_all_paths() {
        let (sys, mats) = two_part(6);
        let grid = TimeGrid::new(8, 60.0).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &mats, 1800.0, 3.0).unwrap();
        let noise = NoiseModel::new(0.1, f.rows()).unwrap();
        let oracle = dense_oracle_posterior(&f.to_dense(), &noise, &prior).unwrap();
        let prior_diag = prior.prior_variance_diag();
        let opts = EigOptions { rank: sys.n_x, ..Default::default() };
        let tt = TtForwardMap::new(&sys, &grid, AmenOptions { tol: 1e-12, ..Default::default() });
        for form in [Formulation::PriorInner, Formulation::MassInner] {
            for (backend, map) in [(Backend::Direct, &f as &dyn ParameterToObservable), (Backend::Tensor, &tt)] {
                let s = misfit_eigenpairs(map, &prior, &noise, form, backend, &opts).unwrap();
                let v = posterior_variance(&s, &prior, &prior_diag, form).unwrap();
                for k in 0..sys.n_x {
                    let rel = (v.values[k] - oracle[(k, k)]).abs() / oracle[(k, k)];
                    assert!(rel <= 1e-8, "{form:?}/{backend:?} node {k}: {rel:e}");
                    assert!(v.values[k] <= prior_diag[k] + 1e-8);
                }
            }
        }
    }

    #[test]
    fn map_recovers_consistent_and_observed_states() {
        let (sys, mats) = two_part(4);
        let grid = TimeGrid::new(4, 60.0).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &mats, 1800.0, 3.0)
            .unwrap()
            .with_mean((0..sys.n_x).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        let noise = NoiseModel::new(0.1, f.rows()).unwrap().with_mean(0.01);
        let u = InputSignal::Zero;
        let f0 = observation_offset(&sys, &grid, &u).unwrap();
        let fm = f.matvec(&prior.mean).unwrap();
        let data: Vec<f64> = (0..f.rows()).map(|i| f0[i] + fm[i] + noise.mean).collect();
        let map = map_point(&f, &f0, &prior, &noise, &data).unwrap();
        assert!(map.converged);
        for (a, b) in map.point.iter().zip(&prior.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = SensitivityBundle::zeros(grid.n_points(), sys.n_y, sys.n_x).unwrap();
        let map = map_point(&zero, &f0, &prior, &noise, &data).unwrap();
        assert_eq!(map.point, prior.mean);
    }

    #[test]
    fn map_approaches_truth_for_small_noise() {
        // every node observed
        let spec = GeometryConfig {
            parts: vec![PartSpec {
                material: MaterialPart { id: 0, rho: 1.0, cp: 1.0, lambda: 1.0 },
                lower: vec![0.0],
                upper: vec![1.0],
                elements: vec![4],
            }],
            sensors: (0..5).map(|i| SensorSpec { part: 0, point: vec![i as f64 * 0.25] }).collect(),
            ..Default::default()
        };
        let model = build_coupled_geometry(&spec).unwrap();
        let sys = assemble(&model).unwrap();
        let grid = TimeGrid::new(2, 0.01).unwrap();
        let f = assemble_f(&sys, &grid).unwrap();
        let prior = PriorModel::calibrate(&sys, &model.materials(), 1800.0, 3.0).unwrap();
        let noise = NoiseModel::new(1e-8, f.rows()).unwrap();
        let truth = [1.0, -0.5, 2.0, 0.25, -1.5];
        let f0 = vec![0.0; f.rows()];
        let data = f.matvec(&truth).unwrap();
        let map = map_point(&f, &f0, &prior, &noise, &data).unwrap();
        // dense least-squares oracle
        let fd = f.to_dense();
        let ls = (fd.transpose() * &fd).lu().solve(&(fd.transpose() * nalgebra::DVector::from_vec(data))).unwrap();
        for k in 0..5 {
            assert!((map.point[k] - truth[k]).abs() <= 1e-4);
            assert!((ls[k] - truth[k]).abs() <= 1e-8);
        }
    }

    #[test]
    fn field_statistics() {
        let a = [1.0, 2.0, 3.0];
        let z = compare_fields(&a, &a).unwrap();
        assert_eq!((z.max_abs_diff, z.mean_abs_diff, z.max_rel_diff), (0.0, 0.0, 0.0));
        let b: Vec<f64> = a.iter().map(|v| v + 1e-5).collect();
        let c = compare_fields(&b, &a).unwrap();
        assert!((c.max_abs_diff - 1e-5).abs() < 1e-15);
        assert!(compare_fields(&a, &a[..2]).is_err());
    }

    #[test]
    fn size_guard() {
        let n = DENSE_ORACLE_LIMIT + 1;
        let diag = vec![1.0; n];
        let d = CsrMatrix::from_diagonal(&diag);
        let sys = StateSpaceSystem::from_matrices(vec![0, n], d.clone(), d.clone(), d.clone(), d.clone(), CsrMatrix::zeros(n, 0), CsrMatrix::zeros(0, n))
            .unwrap();
        let prior = PriorModel::from_coefficients(&sys, &[1.0], &[1.0]).unwrap();
        let noise = NoiseModel::new(1.0, 0).unwrap();
        assert!(matches!(
            dense_oracle_posterior(&DMatrix::zeros(0, n), &noise, &prior),
            Err(Error::SizeGuard { .. })
        ));
    }
}
