//! Geometry of the invariant affine subspace `𝓑 = u₀^⊥ + span{e₀^(j)}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::linalg::orthonormal_range;

/// Relative singular-value threshold for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Bases frozen at `t = 0`.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    /// Orthonormal `n_x × (J−1)` basis `Q` of the initial spread span.
    pub spread_basis: DMatrix<f64>,
    /// `u₀^⊥ = ū₀ − Q Qᵀ ū₀`.
    pub offset: DVector<f64>,
    /// Orthonormal basis of `span{u₀^⊥} ⊕ span{e₀^(j)}`.
    pub container_basis: DMatrix<f64>,
    /// Orthonormal basis of `span{u₀^(j)}`.
    pub member_basis: DMatrix<f64>,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.spread_basis.nrows()
    }

    /// Orthogonal projection onto the spread span (the tangent space of 𝓑).
    pub fn project_spread(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.spread_basis * self.spread_basis.tr_mul(x)
    }

    /// Distance of `x` from the affine set 𝓑.
    pub fn affine_distance(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.offset;
        (&d - self.project_spread(&d)).norm()
    }

    /// `x = u₀^⊥ + Q c`.
    pub fn from_coordinates(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.spread_basis * c
    }

    pub fn coordinates(&self, x: &DVector<f64>) -> DVector<f64> {
        self.spread_basis.tr_mul(&(x - &self.offset))
    }

    /// `‖(I − P_S) x‖` for the member span `S = span{u₀^(j)}`.
    pub fn member_residual(&self, x: &DVector<f64>) -> f64 {
        (x - &self.member_basis * self.member_basis.tr_mul(x)).norm()
    }
}

pub fn build_subspace(initial: &Ensemble) -> Result<SubspaceBasis> {
    let expected = initial.size() - 1;
    let spread_basis = orthonormal_range(&initial.deviations(), RANK_TOL);
    if spread_basis.ncols() < expected {
        return Err(Error::DegenerateEnsemble {
            rank: spread_basis.ncols(),
            expected,
        });
    }
    let mean = initial.mean();
    let offset = &mean - &spread_basis * spread_basis.tr_mul(&mean);
    let scale = initial.members().norm().max(f64::MIN_POSITIVE);
    let container_basis = if offset.norm() > RANK_TOL * scale {
        let mut m = spread_basis.clone().insert_column(expected, 0.0);
        m.set_column(expected, &(offset.normalize()));
        m
    } else {
        spread_basis.clone()
    };
    let member_basis = orthonormal_range(initial.members(), RANK_TOL);
    Ok(SubspaceBasis {
        spread_basis,
        offset,
        container_basis,
        member_basis,
    })
}

/// Orthogonal projection onto the container subspace.
pub fn project(basis: &SubspaceBasis, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("projection operand", basis.dim(), x.len())?;
    Ok(&basis.container_basis * basis.container_basis.tr_mul(x))
}

/// Smallest eigenvalue of `Qᵀ C Q` over the frozen spread basis `Q`.
///
/// The container direction `u₀^⊥` is excluded: it is orthogonal to every
/// spread vector, so the quadratic form of any sample covariance vanishes
/// along it.
pub fn restricted_min_eigenvalue(cov: &DMatrix<f64>, basis: &SubspaceBasis) -> f64 {
    let q = &basis.spread_basis;
    if q.ncols() == 0 {
        return 0.0;
    }
    let reduced = q.tr_mul(&(cov * q));
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::compute_stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_pair() -> Ensemble {
        Ensemble::new(DMatrix::identity(2, 2)).unwrap()
    }

    fn random(seed: u64, n: usize, j: usize) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::new(DMatrix::from_fn(n, j, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn unit_pair_geometry() {
        let b = build_subspace(&unit_pair()).unwrap();
        assert_eq!(b.spread_basis.ncols(), 1);
        let q = b.spread_basis.column(0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[0].abs() - s).abs() < 1e-14 && (q[0] + q[1]).abs() < 1e-14);
        assert!((&b.offset - DVector::from_vec(vec![0.5, 0.5])).amax() < 1e-14);
        assert!(b.spread_basis.tr_mul(&b.offset).amax() < 1e-14);
    }

    #[test]
    fn centered_ensemble_has_zero_offset() {
        let e = Ensemble::new(DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let b = build_subspace(&e).unwrap();
        assert_eq!(b.offset.amax(), 0.0);
        assert_eq!(b.container_basis.ncols(), 1);
    }

    #[test]
    fn projector_is_symmetric_idempotent() {
        let b = build_subspace(&random(1, 20, 5)).unwrap();
        let p = &b.container_basis * b.container_basis.transpose();
        assert!((&p * &p - &p).amax() <= 1e-12);
        assert!((&p - p.transpose()).amax() <= 1e-12);
        let gram = b.spread_basis.tr_mul(&b.spread_basis);
        assert!((gram - DMatrix::identity(4, 4)).amax() <= 1e-12);
    }

    #[test]
    fn projection_cases() {
        let e = random(2, 10, 4);
        let b = build_subspace(&e).unwrap();
        let inside = e.member(2) * 0.3 - e.member(0) * 1.7;
        assert!((project(&b, &inside).unwrap() - &inside).amax() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let outside = &x - &b.member_basis * b.member_basis.tr_mul(&x);
        assert!(project(&b, &outside).unwrap().amax() < 1e-12);

        // least-squares oracle with the raw members as a (non-orthogonal) basis
        let m = e.members();
        let coef = (m.tr_mul(m)).lu().solve(&m.tr_mul(&x)).unwrap();
        assert!((project(&b, &x).unwrap() - m * coef).amax() < 1e-12);
        assert!(project(&b, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn degenerate_ensemble_rejected() {
        let e = Ensemble::new(DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]))
            .unwrap();
        assert!(matches!(
            build_subspace(&e),
            Err(Error::DegenerateEnsemble { rank: 1, expected: 2 })
        ));
    }

    #[test]
    fn restricted_eigenvalue_cases() {
        let e = unit_pair();
        let b = build_subspace(&e).unwrap();
        assert!((restricted_min_eigenvalue(&DMatrix::identity(2, 2), &b) - 1.0).abs() < 1e-14);
        let cov = compute_stats(&e, e.members()).unwrap().cov;
        assert!((restricted_min_eigenvalue(&cov, &b) - 0.5).abs() < 1e-14);
        let ortho = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(restricted_min_eigenvalue(&ortho, &b) < 1e-15);
    }

    #[test]
    fn initial_zeta_positive_for_independent_ensembles() {
        for seed in 0..10 {
            let e = random(seed, 12, 6);
            let b = build_subspace(&e).unwrap();
            let cov = compute_stats(&e, &DMatrix::zeros(1, 6)).unwrap().cov;
            assert!(restricted_min_eigenvalue(&cov, &b) > 0.0);
        }
    }
}
