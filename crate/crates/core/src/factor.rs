//! Sparse direct factorization.
//!
//! Reverse Cuthill–McKee reordering followed by a skyline (variable band)
//! LU factorization without pivoting. The profile is taken from the
//! symmetrized pattern, which is exact for finite-element matrices. The
//! factorization is computed once and reused for any number of right-hand
//! sides. It is generic over real and complex scalars because the
//! tensor-train solver needs complex-shifted spatial systems.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::ComplexField;

use crate::error::{check_len, Error, Result};
use crate::sparse::CsrMatrix;

/// Relative pivot threshold below which the matrix is declared singular.
const PIVOT_TOL: f64 = 1e-14;

/// A fill-reducing symmetric permutation. `perm[new] = old`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    /// Reverse Cuthill–McKee on the symmetrized pattern of `pattern`.
    pub fn rcm(pattern: &CsrMatrix) -> Self {
        let n = pattern.nrows();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j, _) in pattern.triplets() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            // lowest-degree unvisited node seeds the next component
            let seed = (0..n)
                .filter(|&i| !visited[i])
                .min_by_key(|&i| (degree[i], i))
                .unwrap();
            let start = pseudo_peripheral(seed, &adj, &degree);
            visited[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
                next.sort_by_key(|&w| (degree[w], w));
                for w in next {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
        order.reverse();
        Self::from_permutation(order)
    }

    fn from_permutation(perm: Vec<usize>) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Self { perm, inverse }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut best_ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(current, adj);
        let ecc = *levels.iter().filter(|&&l| l != usize::MAX).max().unwrap_or(&0);
        if ecc <= best_ecc && best_ecc > 0 {
            break;
        }
        best_ecc = ecc;
        let candidate = (0..adj.len())
            .filter(|&i| levels[i] == ecc)
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<usize> {
    let mut levels = vec![usize::MAX; adj.len()];
    levels[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if levels[w] == usize::MAX {
                levels[w] = levels[v] + 1;
                queue.push_back(w);
            }
        }
    }
    levels
}

/// Skyline LU factors `P A Pᵀ = L U` with unit lower `L`.
///
/// Row `i` of `L` and column `i` of `U` both span columns/rows
/// `first[i]..i` and are stored contiguously.
#[derive(Debug, Clone)]
pub struct SparseLu<T> {
    ordering: Ordering,
    first: Vec<usize>,
    offsets: Vec<usize>,
    lower: Vec<T>,
    upper: Vec<T>,
    diag: Vec<T>,
}

impl SparseLu<f64> {
    /// Factorizes a real square matrix with an RCM ordering.
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let ordering = Ordering::rcm(a);
        Self::factor_combination(&[(1.0, a)], &ordering)
    }
}

impl<T> SparseLu<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    /// Factorizes `Σ cᵢ Aᵢ` for matrices sharing one dimension.
    pub fn factor_combination(terms: &[(T, &CsrMatrix)], ordering: &Ordering) -> Result<Self> {
        let n = terms.first().map(|(_, a)| a.nrows()).unwrap_or(0);
        for (_, a) in terms {
            check_len("factorized matrix rows", n, a.nrows())?;
            check_len("factorized matrix columns", n, a.ncols())?;
        }
        check_len("ordering", n, ordering.len())?;
        let inv = &ordering.inverse;

        let mut first: Vec<usize> = (0..n).collect();
        for (_, a) in terms {
            for (i, j, _) in a.triplets() {
                let (pi, pj) = (inv[i], inv[j]);
                let (lo, hi) = if pi < pj { (pi, pj) } else { (pj, pi) };
                if lo < first[hi] {
                    first[hi] = lo;
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            offsets.push(offsets[i] + (i - first[i]));
        }
        let profile = offsets[n];
        let mut lower = vec![T::zero(); profile];
        let mut upper = vec![T::zero(); profile];
        let mut diag = vec![T::zero(); n];
        let mut row_scale = vec![0.0f64; n];

        for &(c, a) in terms {
            for (i, j, v) in a.triplets() {
                let (pi, pj) = (inv[i], inv[j]);
                let value = c * T::from_real(v);
                row_scale[pi] += value.modulus();
                if pi == pj {
                    diag[pi] += value;
                } else if pj < pi {
                    lower[offsets[pi] + pj - first[pi]] += value;
                } else {
                    upper[offsets[pj] + pi - first[pj]] += value;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let (li, ui) = (offsets[i], offsets[i]);
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let lj = offsets[j];
                // U[j, i]
                let mut acc = upper[ui + j - fi];
                for p in lo..j {
                    acc -= lower[lj + p - fj] * upper[ui + p - fi];
                }
                upper[ui + j - fi] = acc;
                // L[i, j]
                let mut acc = lower[li + j - fi];
                for p in lo..j {
                    acc -= lower[li + p - fi] * upper[lj + p - fj];
                }
                lower[li + j - fi] = acc / diag[j];
            }
            let mut acc = diag[i];
            for p in fi..i {
                acc -= lower[li + p - fi] * upper[ui + p - fi];
            }
            if !(acc.modulus() > PIVOT_TOL * row_scale[i]) {
                return Err(Error::Factorization {
                    row: ordering.perm[i],
                });
            }
            diag[i] = acc;
        }

        Ok(Self {
            ordering: ordering.clone(),
            first,
            offsets,
            lower,
            upper,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A x = b`, overwriting `b` with `x`.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<T> = self.ordering.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.lower[self.offsets[i]..self.offsets[i + 1]];
            let mut acc = y[i];
            for (p, l) in (fi..i).zip(row) {
                acc -= *l * y[p];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let xi = y[i] / self.diag[i];
            y[i] = xi;
            let fi = self.first[i];
            let col = &self.upper[self.offsets[i]..self.offsets[i + 1]];
            for (p, u) in (fi..i).zip(col) {
                y[p] -= *u * xi;
            }
        }
        for (new, &old) in self.ordering.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Number of stored factor entries (both triangles plus diagonal).
    pub fn profile_len(&self) -> usize {
        2 * self.lower.len() + self.diag.len()
    }

    pub fn memory_bytes(&self) -> usize {
        self.profile_len() * core::mem::size_of::<T>()
            + (self.first.len() + self.offsets.len() + 2 * self.ordering.len()) * core::mem::size_of::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Complex, DMatrix, DVector};

    fn laplacian_2d(m: usize) -> CsrMatrix {
        let n = m * m;
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let k = i * m + j;
                t.push((k, k, 4.5));
                if i > 0 {
                    t.push((k, k - m, -1.0));
                }
                if i + 1 < m {
                    t.push((k, k + m, -1.0));
                }
                if j > 0 {
                    t.push((k, k - 1, -1.0));
                }
                if j + 1 < m {
                    t.push((k, k + 1, -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn solves_against_dense_lu() {
        let a = laplacian_2d(7);
        // break symmetry of values, keep pattern
        let a = a.linear_combination(1.0, &CsrMatrix::from_triplets(49, 49, &[(3, 4, 0.3), (10, 3, -0.2)]).unwrap(), 1.0);
        let b: Vec<f64> = (0..49).map(|i| (i as f64 * 0.37).sin()).collect();
        let lu = SparseLu::new(&a).unwrap();
        let x = lu.solve(&b);
        let dense = a.to_dense().lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for i in 0..49 {
            assert!((x[i] - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian_2d(5);
        let o = Ordering::rcm(&a);
        let mut seen = o.perm.clone();
        seen.sort();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
        for (new, &old) in o.perm.iter().enumerate() {
            assert_eq!(o.inverse[old], new);
        }
    }

    #[test]
    fn complex_shifted_combination() {
        let k = laplacian_2d(4);
        let m = CsrMatrix::identity(16);
        let shift = Complex::new(0.7, 0.4);
        let o = Ordering::rcm(&k);
        let lu = SparseLu::factor_combination(&[(Complex::new(1.0, 0.0), &k), (shift, &m)], &o).unwrap();
        let b: Vec<Complex<f64>> = (0..16).map(|i| Complex::new(i as f64, 1.0)).collect();
        let x = lu.solve(&b);
        let dense: DMatrix<Complex<f64>> =
            k.to_dense().map(|v| Complex::new(v, 0.0)) + DMatrix::identity(16, 16) * shift;
        let r = &dense * DVector::from_vec(x) - DVector::from_vec(b);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        // pure Neumann 1D Laplacian: constants are in the null space
        let a = CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0), (1, 2, -1.0), (2, 1, -1.0), (2, 2, 1.0)],
        )
        .unwrap();
        assert!(matches!(SparseLu::new(&a), Err(Error::Factorization { .. })));
        assert!(matches!(SparseLu::new(&CsrMatrix::zeros(2, 2)), Err(Error::Factorization { .. })));
    }
}
