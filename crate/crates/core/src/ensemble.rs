//! Particle ensembles and their empirical moments.
//!
//! Every moment here uses the divisor `1/J`, not the unbiased `1/(J-1)`.
//! The flows and all bounds are written in terms of the `1/J` covariance, so
//! swapping in a "sample" covariance from a statistics library would silently
//! rescale every rate by `J/(J-1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// A set of `J ≥ 2` parameter vectors stored as the columns of an
/// `n_x × J` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        match members.ncols() {
            0 => Err(Error::EmptyEnsemble),
            1 => Err(Error::TooFewMembers(1)),
            _ if members.nrows() == 0 => Err(Error::EmptyEnsemble),
            _ => Ok(Self { members }),
        }
    }

    pub fn from_members(members: &[DVector<f64>]) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        let dim = first.len();
        for m in members {
            check_dim("ensemble member", dim, m.len())?;
        }
        Self::new(DMatrix::from_columns(members))
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.column(j).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        column_mean(&self.members)
    }

    /// Spread vectors `e^(j) = u^(j) - ū` as columns.
    pub fn deviations(&self) -> DMatrix<f64> {
        deviations(&self.members)
    }

    /// `V_e = (1/J) Σ ‖u^(j) - ū‖²`.
    pub fn spread(&self) -> f64 {
        self.deviations().norm_squared() / self.size() as f64
    }

    /// Contract (`s < 1`) or expand every member about the ensemble mean.
    pub fn scaled_about_mean(&self, s: f64) -> Self {
        let mean = self.mean();
        let mut out = self.deviations() * s;
        for mut c in out.column_iter_mut() {
            c += &mean;
        }
        Self { members: out }
    }
}

pub(crate) fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

pub(crate) fn deviations(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_mean(m);
    let mut out = m.clone();
    for mut c in out.column_iter_mut() {
        c -= &mean;
    }
    out
}

/// Arithmetic mean of the members.
pub fn compute_mean(ensemble: &Ensemble) -> DVector<f64> {
    ensemble.mean()
}

/// `V_e`, equal to the trace of the `1/J` sample covariance.
pub fn ensemble_spread(ensemble: &Ensemble) -> f64 {
    ensemble.spread()
}

/// Empirical first and second moments of an ensemble together with its
/// forward-map images.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub g_mean: DVector<f64>,
    /// `C(u) = (1/J) Σ e^(j) e^(j)ᵀ`.
    pub cov: DMatrix<f64>,
    /// `C^{uG} = (1/J) Σ e^(j) (G(u^(j)) - Ḡ)ᵀ`.
    pub cross_cov: DMatrix<f64>,
    /// `C^{GG} = (1/J) Σ (G(u^(j)) - Ḡ)(G(u^(j)) - Ḡ)ᵀ`.
    pub out_cov: DMatrix<f64>,
    pub spread: f64,
    factor: DMatrix<f64>,
    g_factor: DMatrix<f64>,
}

impl EnsembleStats {
    /// `E = [e^(1), …, e^(J)] / √J`, so that `cov = E Eᵀ`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Output-space counterpart of [`factor`](Self::factor).
    pub fn g_factor(&self) -> &DMatrix<f64> {
        &self.g_factor
    }

    /// `C^{Gu}`.
    pub fn cross_cov_t(&self) -> DMatrix<f64> {
        self.cross_cov.transpose()
    }
}

/// Compute all moments. `g_values` holds `G(u^(j))` as its `j`-th column.
pub fn compute_stats(ensemble: &Ensemble, g_values: &DMatrix<f64>) -> Result<EnsembleStats> {
    check_dim("forward values per member", ensemble.size(), g_values.ncols())?;
    let j = ensemble.size() as f64;
    let scale = 1.0 / j.sqrt();
    let factor = ensemble.deviations() * scale;
    let g_factor = deviations(g_values) * scale;
    let cov = &factor * factor.transpose();
    let cross_cov = &factor * g_factor.transpose();
    let out_cov = &g_factor * g_factor.transpose();
    let spread = factor.norm_squared();
    Ok(EnsembleStats {
        mean: ensemble.mean(),
        g_mean: column_mean(g_values),
        cov,
        cross_cov,
        out_cov,
        spread,
        factor,
        g_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_unit() -> Ensemble {
        Ensemble::from_members(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ])
        .unwrap()
    }

    fn random_members(rng: &mut ChaCha8Rng, n: usize, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, j, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn mean_of_unit_pair() {
        assert_eq!(two_unit().mean(), DVector::from_vec(vec![0.5, 0.5]));
    }

    #[test]
    fn mean_of_identical_members() {
        let v = DVector::from_vec(vec![1.5, -2.0, 3.0]);
        let e = Ensemble::from_members(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(e.mean(), v);
    }

    #[test]
    fn mean_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_members(&mut rng, 3, 5);
        let e = Ensemble::new(m.clone()).unwrap();
        let mut direct = [0.0; 3];
        for j in 0..5 {
            for i in 0..3 {
                direct[i] += m[(i, j)];
            }
        }
        for i in 0..3 {
            assert!((e.mean()[i] - direct[i] / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_singleton_rejected() {
        assert!(matches!(
            Ensemble::new(DMatrix::zeros(3, 0)),
            Err(Error::EmptyEnsemble)
        ));
        assert!(matches!(
            Ensemble::from_members(&[]),
            Err(Error::EmptyEnsemble)
        ));
        assert!(matches!(
            Ensemble::new(DMatrix::zeros(3, 1)),
            Err(Error::TooFewMembers(1))
        ));
    }

    #[test]
    fn mismatched_member_dims_rejected() {
        let r = Ensemble::from_members(&[DVector::zeros(2), DVector::zeros(3)]);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn identical_members_have_zero_moments() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let e = Ensemble::from_members(&[v.clone(), v.clone(), v]).unwrap();
        let g = DMatrix::from_element(4, 3, 7.0);
        let s = compute_stats(&e, &g).unwrap();
        assert_eq!(s.cov.amax(), 0.0);
        assert_eq!(s.cross_cov.amax(), 0.0);
        assert_eq!(s.spread, 0.0);
    }

    #[test]
    fn unit_pair_covariance() {
        let e = two_unit();
        let s = compute_stats(&e, e.members()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((&s.cov - expected).amax() < 1e-15);
        assert!((s.spread - 0.5).abs() < 1e-15);
        assert!((ensemble_spread(&e) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stats_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, j, k) = (3, 4, 2);
        let u = random_members(&mut rng, n, j);
        let g = random_members(&mut rng, k, j);
        let s = compute_stats(&Ensemble::new(u.clone()).unwrap(), &g).unwrap();

        let mut ubar = vec![0.0; n];
        let mut gbar = vec![0.0; k];
        for c in 0..j {
            for i in 0..n {
                ubar[i] += u[(i, c)] / j as f64;
            }
            for i in 0..k {
                gbar[i] += g[(i, c)] / j as f64;
            }
        }
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for c in 0..j {
                    acc += (u[(a, c)] - ubar[a]) * (u[(b, c)] - ubar[b]);
                }
                assert!((s.cov[(a, b)] - acc / j as f64).abs() < 1e-14);
            }
            for b in 0..k {
                let mut acc = 0.0;
                for c in 0..j {
                    acc += (u[(a, c)] - ubar[a]) * (g[(b, c)] - gbar[b]);
                }
                assert!((s.cross_cov[(a, b)] - acc / j as f64).abs() < 1e-14);
            }
        }
        for a in 0..k {
            for b in 0..k {
                let mut acc = 0.0;
                for c in 0..j {
                    acc += (g[(a, c)] - gbar[a]) * (g[(b, c)] - gbar[b]);
                }
                assert!((s.out_cov[(a, b)] - acc / j as f64).abs() < 1e-14);
            }
        }
        assert!((&s.cross_cov_t() - s.cross_cov.transpose()).amax() == 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let e = two_unit();
        assert!(compute_stats(&e, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn spread_is_quadratically_homogeneous() {
        let e = two_unit();
        let scaled = Ensemble::new(e.members() * 3.0).unwrap();
        assert!((scaled.spread() - 9.0 * e.spread()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn trace_equals_spread_and_linear_cross_cov(seed in 0u64..500, n in 2usize..7, j in 2usize..8, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_members(&mut rng, n, j);
            let a = random_members(&mut rng, k, n);
            let e = Ensemble::new(u.clone()).unwrap();
            let g = &a * &u;
            let s = compute_stats(&e, &g).unwrap();
            prop_assert!((s.cov.trace() - s.spread).abs() <= 1e-13 * s.spread.max(1e-300));
            let lin = &s.cov * a.transpose();
            prop_assert!((&s.cross_cov - &lin).amax() <= 1e-12 * lin.amax().max(1.0));
            prop_assert!((&s.factor * s.factor.transpose() - &s.cov).amax() <= 1e-14);
        }

        #[test]
        fn covariance_annihilates_complement_of_spread(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, j) = (8, 4);
            let e = Ensemble::new(random_members(&mut rng, n, j)).unwrap();
            let s = compute_stats(&e, &DMatrix::zeros(1, j)).unwrap();
            let q = crate::linalg::orthonormal_range(&e.deviations(), 1e-12);
            prop_assert_eq!(q.ncols(), j - 1);
            let z = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let z = &z - &q * (q.transpose() * &z);
            let cz = &s.cov * &z;
            prop_assert!(cz.amax() <= 1e-11 * s.cov.amax());
            let sv = crate::linalg::singular_values(&s.cov);
            for v in &sv[j - 1..] {
                prop_assert!(*v <= 1e-12 * sv[0]);
            }
        }
    }
}
