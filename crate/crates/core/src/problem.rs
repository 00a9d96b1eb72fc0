//! Forward maps, data misfit and the Tikhonov-regularized loss.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, SpdFactor};

/// A deterministic parameter-to-observation map `G: ℝ^{n_x} → ℝ^K`.
pub trait ForwardModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Evaluate every column of `members`, one column of output per member.
    fn evaluate_columns(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..members.ncols())
            .into_par_iter()
            .map(|j| self.evaluate(&members.column(j).into_owned()))
            .collect::<Result<_>>()?;
        let out = DMatrix::from_columns(&cols);
        if !all_finite(out.as_slice()) {
            return Err(Error::NonFinite("forward output"));
        }
        Ok(out)
    }
}

/// A forward map with an exact Jacobian `DG(x)` (`K × n_x`).
///
/// Jacobians feed diagnostics and the reference optimizer only; the flows
/// never call them.
pub trait DifferentiableForward: ForwardModel {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `G(x) = A x`.
#[derive(Debug, Clone)]
pub struct LinearForward {
    matrix: DMatrix<f64>,
}

impl LinearForward {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ForwardModel for LinearForward {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("linear forward input", self.input_dim(), x.len())?;
        Ok(&self.matrix * x)
    }

    fn evaluate_columns(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("linear forward input", self.input_dim(), members.nrows())?;
        Ok(&self.matrix * members)
    }
}

impl DifferentiableForward for LinearForward {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("linear forward input", self.input_dim(), x.len())?;
        Ok(self.matrix.clone())
    }
}

/// `G`, data `y`, noise covariance `Γ`, regularization matrix `C₀` and
/// regularization scale `κ`.
///
/// `Φ(x) = ½‖Γ^{-1/2}(G(x) - y)‖²` and `Φ_R(x) = Φ(x) + (κ/2) xᵀ C₀⁻¹ x`.
#[derive(Debug, Clone)]
pub struct InverseProblem<F> {
    forward: F,
    data: DVector<f64>,
    noise: SpdFactor,
    reg: SpdFactor,
    kappa: f64,
}

impl<F: ForwardModel> InverseProblem<F> {
    pub fn new(
        forward: F,
        data: DVector<f64>,
        noise_cov: DMatrix<f64>,
        reg_matrix: DMatrix<f64>,
        kappa: f64,
    ) -> Result<Self> {
        check_dim("data", forward.output_dim(), data.len())?;
        check_dim("noise covariance", forward.output_dim(), noise_cov.nrows())?;
        check_dim("regularization matrix", forward.input_dim(), reg_matrix.nrows())?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be finite and nonnegative, got {kappa}"
            )));
        }
        Ok(Self {
            forward,
            data,
            noise: SpdFactor::new(noise_cov, "noise covariance")?,
            reg: SpdFactor::new(reg_matrix, "regularization matrix")?,
            kappa,
        })
    }

    pub fn forward(&self) -> &F {
        &self.forward
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn noise(&self) -> &SpdFactor {
        &self.noise
    }

    pub fn reg(&self) -> &SpdFactor {
        &self.reg
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.output_dim()
    }

    /// Same problem with another regularization scale.
    pub fn with_kappa(&self, kappa: f64) -> Self
    where
        F: Clone,
    {
        Self {
            kappa,
            ..self.clone()
        }
    }

    /// `κ C₀⁻¹ x`.
    pub fn reg_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.reg.solve(x) * self.kappa
    }

    pub fn misfit(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("misfit input", self.input_dim(), x.len())?;
        let g = self.forward.evaluate(x)?;
        Ok(self.misfit_from_output(&g))
    }

    pub fn misfit_from_output(&self, g: &DVector<f64>) -> f64 {
        0.5 * self.noise.inv_quad(&(g - &self.data))
    }

    pub fn regularization(&self, x: &DVector<f64>) -> f64 {
        if self.kappa == 0.0 {
            0.0
        } else {
            0.5 * self.kappa * self.reg.inv_quad(x)
        }
    }

    pub fn regularized_loss(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.misfit(x)? + self.regularization(x))
    }
}

impl<F: DifferentiableForward> InverseProblem<F> {
    /// `∇Φ(x) = DG(x)ᵀ Γ⁻¹ (G(x) - y)`.
    pub fn grad_misfit(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("gradient input", self.input_dim(), x.len())?;
        let g = self.forward.evaluate(x)?;
        let jac = self.forward.jacobian(x)?;
        Ok(jac.transpose() * self.noise.solve(&(g - &self.data)))
    }

    /// `∇Φ_R(x) = DG(x)ᵀ Γ⁻¹ (G(x) - y) + κ C₀⁻¹ x`.
    pub fn grad_regularized_loss(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.grad_misfit(x)? + self.reg_gradient(x))
    }
}

/// Central finite-difference Jacobian; test oracle only.
pub fn finite_difference_jacobian<F: ForwardModel + ?Sized>(
    forward: &F,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(forward.output_dim(), forward.input_dim());
    for l in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[l] += step;
        xm[l] -= step;
        let d = (forward.evaluate(&xp)? - forward.evaluate(&xm)?) / (2.0 * step);
        jac.set_column(l, &d);
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_problem(y: DVector<f64>, gamma: f64) -> InverseProblem<LinearForward> {
        let n = y.len();
        InverseProblem::new(
            LinearForward::new(DMatrix::identity(n, n)),
            y,
            DMatrix::identity(n, n) * gamma,
            DMatrix::identity(n, n),
            1.0,
        )
        .unwrap()
    }

    struct Constant(DVector<f64>, usize);

    impl ForwardModel for Constant {
        fn input_dim(&self) -> usize {
            self.1
        }
        fn output_dim(&self) -> usize {
            self.0.len()
        }
        fn evaluate(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(self.0.clone())
        }
    }

    fn random_linear(seed: u64, n: usize, k: usize, kappa: f64) -> InverseProblem<LinearForward> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c0 = &b * b.transpose() + DMatrix::identity(n, n);
        let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.3..0.3));
        let gamma = &g * g.transpose() + DMatrix::identity(k, k) * 0.5;
        InverseProblem::new(LinearForward::new(a), y, gamma, c0, kappa).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_misfit() {
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let p = identity_problem(x.clone(), 1.0);
        assert_eq!(p.misfit(&x).unwrap(), 0.0);
    }

    #[test]
    fn misfit_hand_value_and_gamma_homogeneity() {
        let x = DVector::from_vec(vec![3.0, 4.0]);
        let p = identity_problem(DVector::zeros(2), 1.0);
        assert!((p.misfit(&x).unwrap() - 12.5).abs() < 1e-14);
        let p4 = identity_problem(DVector::zeros(2), 4.0);
        assert!((p4.misfit(&x).unwrap() - 12.5 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let p = identity_problem(DVector::zeros(2), 1.0);
        assert!(matches!(
            p.misfit(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(p.regularized_loss(&DVector::zeros(1)).is_err());
    }

    #[test]
    fn regularized_loss_values() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let p = InverseProblem::new(
            Constant(y.clone(), 2),
            y.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        assert!((p.regularized_loss(&DVector::from_vec(vec![1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);

        let lin = identity_problem(DVector::zeros(2), 1.0);
        assert_eq!(lin.regularized_loss(&DVector::zeros(2)).unwrap(), 0.0);

        let x = DVector::from_vec(vec![0.7, -0.1]);
        let q = random_linear(5, 2, 2, 0.0);
        assert_eq!(q.regularized_loss(&x).unwrap(), q.misfit(&x).unwrap());
    }

    #[test]
    fn rejects_bad_covariances() {
        let r = InverseProblem::new(
            LinearForward::new(DMatrix::identity(2, 2)),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DMatrix::identity(2, 2),
            1.0,
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let p = random_linear(7, 5, 3, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let g = p.grad_regularized_loss(&x).unwrap();
        let h = 1e-5;
        for l in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[l] += h;
            xm[l] -= h;
            let fd = (p.regularized_loss(&xp).unwrap() - p.regularized_loss(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[l]).abs() < 1e-6, "component {l}: {fd} vs {}", g[l]);
        }
    }

    #[test]
    fn gradient_vanishes_at_unconstrained_minimizer() {
        let p = random_linear(9, 4, 6, 0.3);
        let a = p.forward().matrix();
        let gi = p.noise().matrix().clone().try_inverse().unwrap();
        let ci = p.reg().matrix().clone().try_inverse().unwrap();
        let h = a.transpose() * &gi * a + &ci * p.kappa();
        let rhs = a.transpose() * &gi * p.data();
        let xstar = h.lu().solve(&rhs).unwrap();
        assert!(p.grad_regularized_loss(&xstar).unwrap().norm() <= 1e-10);
    }

    proptest! {
        #[test]
        fn loss_dominates_misfit(seed in 0u64..200) {
            let p = random_linear(seed, 4, 3, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let m = p.misfit(&x).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert!(p.regularized_loss(&x).unwrap() >= m);
        }

        #[test]
        fn linear_gradient_is_affine(seed in 0u64..200, a in -2.0f64..2.0) {
            let p = random_linear(seed, 4, 3, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let x1 = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let x2 = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let g = |x: &DVector<f64>| p.grad_regularized_loss(x).unwrap();
            let lhs = g(&(&x1 * a + &x2 * (1.0 - a)));
            let rhs = g(&x1) * a + g(&x2) * (1.0 - a);
            prop_assert!((lhs - rhs).amax() <= 1e-10);
        }
    }
}
