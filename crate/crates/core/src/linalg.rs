//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Cached Cholesky factorization `S = L Lᵀ` of a fixed SPD matrix.
///
/// All applications of `S⁻¹` and `S^{-1/2}` go through triangular solves.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>, name: &'static str) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotPositiveDefinite(name));
        }
        let scale = matrix.amax().max(1.0);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::NotPositiveDefinite(name));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = Cholesky::new(sym.clone()).ok_or(Error::NotPositiveDefinite(name))?;
        Ok(Self { matrix: sym, chol })
    }

    pub fn scaled_identity(n: usize, scale: f64, name: &'static str) -> Result<Self> {
        Self::new(DMatrix::identity(n, n) * scale, name)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `S⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `S⁻¹ M`, column by column.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// `L⁻¹ v`, so that `‖L⁻¹ v‖² = vᵀ S⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    /// `vᵀ S⁻¹ v`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    /// Smallest and largest eigenvalue of `S⁻¹`.
    pub fn inverse_spectrum_bounds(&self) -> (f64, f64) {
        let (lo, hi) = spectrum_bounds(&self.matrix);
        (1.0 / hi, 1.0 / lo)
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn spectrum_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Orthonormal basis of the column space of `m`, keeping singular directions
/// whose singular value exceeds `rel_tol` times the largest one.
pub fn orthonormal_range(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    // The left singular vectors of rank-deficient tall matrices come back
    // inaccurate from nalgebra's SVD; the right ones are reliable, so the
    // basis is rebuilt as an orthonormalized `M V_r`.
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * smax)
        .collect();
    let mut v = DMatrix::zeros(m.ncols(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        v.set_column(c, &v_t.row(i).transpose());
    }
    (m * v).qr().q()
}

/// Singular values of `m` in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whiten_matches_inverse_quadratic_form() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::new(m.clone(), "test").unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let direct = v.dot(&(m.clone().try_inverse().unwrap() * &v));
        assert!((f.inv_quad(&v) - direct).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdFactor::new(indef, "x").is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(SpdFactor::new(asym, "x").is_err());
    }

    #[test]
    fn orthonormal_range_drops_null_directions() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 0.0, 1.0, 2.0]);
        let q = orthonormal_range(&m, 1e-12);
        assert_eq!(q.ncols(), 1);
    }

    #[test]
    fn orthonormal_range_reproduces_rank_deficient_columns() {
        use rand::{Rng, SeedableRng};
        for seed in 0..200 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = DMatrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
            let mean = m.column_mean();
            for mut c in m.column_iter_mut() {
                c -= &mean;
            }
            let q = orthonormal_range(&m, 1e-10);
            assert_eq!(q.ncols(), 3);
            assert!((&m - &q * q.tr_mul(&m)).amax() < 1e-13);
            assert!((q.tr_mul(&q) - DMatrix::identity(3, 3)).amax() < 1e-14);
        }
    }
}
