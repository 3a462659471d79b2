//! Laplacian-squared Gaussian prior `Γ_prior = A_h⁻¹ M A_h⁻¹` with
//! `A_h = aK + bM` assembled and calibrated separately on every part.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::factor::SparseLu;
use crate::femkit::{MaterialPart, StateSpaceSystem};
use crate::sparse::{dot, CsrMatrix};

/// Coefficients of one part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartPrior {
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    /// Mean of the nodal prior variances over the part [K²].
    pub achieved_mean_variance: f64,
}

/// Per-part operator blocks. `A_h` on the part is `a·(K + βM)`; only the
/// unscaled matrix is factorized.
#[derive(Debug, Clone)]
struct PartBlock {
    offset: usize,
    scale: f64,
    shifted: CsrMatrix,
    shifted_lu: SparseLu<f64>,
    mass: CsrMatrix,
    mass_lu: SparseLu<f64>,
}

impl PartBlock {
    fn new(sys: &StateSpaceSystem, part: usize, scale: f64, beta: f64) -> Result<Self> {
        let range = sys.part_range(part);
        let stiff = sys.k_unit.principal_block(range.clone());
        let mass = sys.m_unit.principal_block(range.clone());
        let shifted = stiff.linear_combination(1.0, &mass, beta);
        Ok(Self {
            offset: range.start,
            scale,
            shifted_lu: SparseLu::new(&shifted)?,
            shifted,
            mass_lu: SparseLu::new(&mass)?,
            mass,
        })
    }

    fn len(&self) -> usize {
        self.mass.nrows()
    }

    /// `e_jᵀ (K+βM)⁻¹ M (K+βM)⁻¹ e_j` for the local node `j`.
    fn unscaled_variance(&self, j: usize) -> f64 {
        let mut z = vec![0.0; self.len()];
        z[j] = 1.0;
        self.shifted_lu.solve_in_place(&mut z);
        dot(&z, &self.mass.apply(&z))
    }
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    pub parts: Vec<PartPrior>,
    pub prior_time_constant: f64,
    pub target_mean_variance: f64,
    pub mean: Vec<f64>,
    blocks: Vec<PartBlock>,
    n_x: usize,
}

impl PriorModel {
    /// Chooses `β = ρC_p/(τ_prior λ)` per part and scales `a` so that the mean
    /// nodal prior variance of every part equals `target_mean_variance`.
    pub fn calibrate(
        sys: &StateSpaceSystem,
        materials: &[MaterialPart],
        tau_prior: f64,
        target_mean_variance: f64,
    ) -> Result<Self> {
        if !(tau_prior > 0.0) || !tau_prior.is_finite() {
            return Err(Error::Validation(format!("prior time constant must be positive, got {tau_prior}")));
        }
        if !(target_mean_variance > 0.0) || !target_mean_variance.is_finite() {
            return Err(Error::Validation(format!(
                "target mean variance must be positive, got {target_mean_variance}"
            )));
        }
        check_len("materials per part", sys.n_parts(), materials.len())?;
        let mut parts = Vec::with_capacity(materials.len());
        let mut blocks = Vec::with_capacity(materials.len());
        for (p, mat) in materials.iter().enumerate() {
            mat.validate()?;
            let beta = mat.rho * mat.cp / (tau_prior * mat.lambda);
            let mut block = PartBlock::new(sys, p, 1.0, beta)?;
            let unscaled_mean = (0..block.len()).map(|j| block.unscaled_variance(j)).sum::<f64>() / block.len() as f64;
            // Γ_prior(a) = a⁻² Γ_prior(1)
            let a = libm::sqrt(unscaled_mean / target_mean_variance);
            block.scale = a;
            parts.push(PartPrior {
                beta,
                a,
                b: beta * a,
                achieved_mean_variance: unscaled_mean / (a * a),
            });
            blocks.push(block);
        }
        Ok(Self {
            parts,
            prior_time_constant: tau_prior,
            target_mean_variance,
            mean: vec![0.0; sys.n_x],
            blocks,
            n_x: sys.n_x,
        })
    }

    /// Builds the prior from given per-part coefficients `a`, `b > 0`.
    pub fn from_coefficients(sys: &StateSpaceSystem, a: &[f64], b: &[f64]) -> Result<Self> {
        check_len("prior coefficient a", sys.n_parts(), a.len())?;
        check_len("prior coefficient b", sys.n_parts(), b.len())?;
        let mut parts = Vec::new();
        let mut blocks = Vec::new();
        for p in 0..sys.n_parts() {
            if !(a[p] > 0.0 && b[p] > 0.0) {
                return Err(Error::Validation(format!("prior coefficients of part {p} must be positive")));
            }
            let beta = b[p] / a[p];
            let block = PartBlock::new(sys, p, a[p], beta)?;
            let mean = (0..block.len()).map(|j| block.unscaled_variance(j)).sum::<f64>()
                / (block.len() as f64 * a[p] * a[p]);
            parts.push(PartPrior {
                beta,
                a: a[p],
                b: b[p],
                achieved_mean_variance: mean,
            });
            blocks.push(block);
        }
        Ok(Self {
            parts,
            prior_time_constant: f64::NAN,
            target_mean_variance: f64::NAN,
            mean: vec![0.0; sys.n_x],
            blocks,
            n_x: sys.n_x,
        })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<Self> {
        check_len("prior mean", self.n_x, mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n_x
    }

    fn blockwise(&self, v: &[f64], f: impl Fn(&PartBlock, &[f64]) -> Vec<f64>) -> Vec<f64> {
        assert_eq!(v.len(), self.n_x, "vector length does not match the prior dimension");
        let mut out = Vec::with_capacity(self.n_x);
        for block in &self.blocks {
            out.extend(f(block, &v[block.offset..block.offset + block.len()]));
        }
        out
    }

    /// `A_h v`
    pub fn apply_a(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b, x| b.shifted.apply(x).into_iter().map(|y| b.scale * y).collect())
    }

    /// `A_h⁻¹ v`
    pub fn solve_a(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b, x| {
            let mut y = b.shifted_lu.solve(x);
            y.iter_mut().for_each(|y| *y /= b.scale);
            y
        })
    }

    /// `M v`
    pub fn apply_mass(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b, x| b.mass.apply(x))
    }

    /// `M⁻¹ v`
    pub fn solve_mass(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b, x| b.mass_lu.solve(x))
    }

    /// `Γ_prior v = A_h⁻¹ M A_h⁻¹ v`
    pub fn apply_prior(&self, v: &[f64]) -> Vec<f64> {
        self.solve_a(&self.apply_mass(&self.solve_a(v)))
    }

    /// `Γ_prior⁻¹ v = A_h M⁻¹ A_h v`
    pub fn apply_prior_inverse(&self, v: &[f64]) -> Vec<f64> {
        self.apply_a(&self.solve_mass(&self.apply_a(v)))
    }

    /// `Γ^{1/2} v = A_h⁻¹ M v`
    pub fn apply_sqrt(&self, v: &[f64]) -> Vec<f64> {
        self.solve_a(&self.apply_mass(v))
    }

    /// `Γ^{T/2} v = M A_h⁻¹ v`
    pub fn apply_sqrt_transposed(&self, v: &[f64]) -> Vec<f64> {
        self.apply_mass(&self.solve_a(v))
    }

    /// Prior variance of node `k`, `e_kᵀ Γ_prior e_k`.
    pub fn variance_entry(&self, k: usize) -> f64 {
        let block = self
            .blocks
            .iter()
            .find(|b| k >= b.offset && k < b.offset + b.len())
            .expect("node index out of range");
        block.unscaled_variance(k - block.offset) / (block.scale * block.scale)
    }

    /// Exact diagonal of `Γ_prior` by one solve per node.
    pub fn prior_variance_diag(&self) -> Vec<f64> {
        (0..self.n_x).map(|k| self.variance_entry(k)).collect()
    }

    /// Dense `A_h` for oracle computations on small systems.
    pub fn a_h_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.n_x, self.n_x);
        for b in &self.blocks {
            for (i, j, v) in b.shifted.triplets() {
                a[(b.offset + i, b.offset + j)] = b.scale * v;
            }
        }
        a
    }
}
