//! Gaussian covariances `β (-Δ)^{-α}` in the discrete Dirichlet Laplacian
//! eigenbasis, prior sampling and ensemble initialization.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::linalg::singular_values;

/// Discrete sine modes of the second-difference operator on `n` interior
/// nodes of `[0, 1]` (mesh size `h = 1/(n + 1)`).
#[derive(Debug, Clone)]
pub struct LaplacianEigenbasis {
    mesh_size: f64,
    eigenvalues: DVector<f64>,
    /// Columns are the orthonormal modes `z_j`, ordered by eigenvalue.
    vectors: DMatrix<f64>,
}

impl LaplacianEigenbasis {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("eigenbasis needs n > 0".into()));
        }
        let cells = (n + 1) as f64;
        let h = 1.0 / cells;
        let pi = std::f64::consts::PI;
        let eigenvalues =
            DVector::from_fn(n, |j, _| 2.0 / (h * h) * (1.0 - ((j + 1) as f64 * pi * h).cos()));
        let norm = (2.0 / cells).sqrt();
        let vectors = DMatrix::from_fn(n, n, |l, j| {
            norm * ((j + 1) as f64 * pi * (l + 1) as f64 / cells).sin()
        });
        Ok(Self {
            mesh_size: h,
            eigenvalues,
            vectors,
        })
    }

    pub fn for_grid(grid: &crate::darcy::GridSpec) -> Result<Self> {
        Self::new(grid.interior_points())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// The tridiagonal matrix `-Δ_h = (1/h²) tridiag(-1, 2, -1)`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.dim();
        let ih2 = 1.0 / (self.mesh_size * self.mesh_size);
        DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 2.0 * ih2,
            1 => -ih2,
            _ => 0.0,
        })
    }

    /// `V diag(d) Vᵀ`.
    pub fn spectral_matrix(&self, diag: &DVector<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.vectors[(i, j)] * diag[j]);
        scaled * self.vectors.transpose()
    }
}

pub fn build_eigenbasis(grid: &crate::darcy::GridSpec) -> Result<LaplacianEigenbasis> {
    LaplacianEigenbasis::for_grid(grid)
}

/// Covariance `β (-Δ)^{-α}`.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    amplitude: f64,
    exponent: f64,
    basis: Arc<LaplacianEigenbasis>,
}

impl PriorSpec {
    /// `amplitude = 0` is allowed for sampling only (degenerate prior); it
    /// yields no covariance factorization.
    pub fn new(amplitude: f64, exponent: f64, basis: Arc<LaplacianEigenbasis>) -> Result<Self> {
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prior amplitude must be nonnegative, got {amplitude}"
            )));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prior exponent must be positive, got {exponent}"
            )));
        }
        Ok(Self {
            amplitude,
            exponent,
            basis,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn basis(&self) -> &Arc<LaplacianEigenbasis> {
        &self.basis
    }

    /// Per-mode variances `β λ_j^{-α}`.
    pub fn mode_variances(&self) -> DVector<f64> {
        self.basis
            .eigenvalues
            .map(|l| self.amplitude * l.powf(-self.exponent))
    }

    /// Per-mode precisions `λ_j^{α} / β`.
    pub fn mode_precisions(&self) -> DVector<f64> {
        self.basis
            .eigenvalues
            .map(|l| l.powf(self.exponent) / self.amplitude)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.basis.spectral_matrix(&self.mode_variances())
    }
}

/// `Σ_j √(β λ_j^{-α}) ξ_j z_j` with `ξ_j` i.i.d. standard normal.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, rng: &mut R) -> DVector<f64> {
    let n = spec.basis.dim();
    let sd = spec.mode_variances().map(f64::sqrt);
    let coeffs = DVector::from_fn(n, |j, _| sd[j] * rng.sample::<f64, _>(StandardNormal));
    &spec.basis.vectors * coeffs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Scaled leading eigenmodes `√(β λ_j^{-α}) z_j`, `j = 1, …, J`.
    Basis,
    /// `J` independent prior draws.
    Random,
}

/// Singular-value ratio below which an initial ensemble counts as linearly
/// dependent.
pub const INDEPENDENCE_TOL: f64 = 1e-10;

pub fn init_ensemble<R: Rng + ?Sized>(
    strategy: InitStrategy,
    size: usize,
    spec: &PriorSpec,
    rng: &mut R,
) -> Result<Ensemble> {
    let n = spec.basis.dim();
    if size < 2 {
        return Err(Error::TooFewMembers(size));
    }
    let members = match strategy {
        InitStrategy::Basis => {
            if size > n {
                return Err(Error::InvalidParameter(format!(
                    "basis initialization needs J <= n_x ({size} > {n})"
                )));
            }
            let sd = spec.mode_variances().map(f64::sqrt);
            DMatrix::from_fn(n, size, |l, j| sd[j] * spec.basis.vectors[(l, j)])
        }
        InitStrategy::Random => {
            let cols: Vec<DVector<f64>> = (0..size).map(|_| sample_prior(spec, rng)).collect();
            DMatrix::from_columns(&cols)
        }
    };
    check_linear_independence(&members)?;
    Ensemble::new(members)
}

pub(crate) fn check_linear_independence(members: &DMatrix<f64>) -> Result<()> {
    if members.ncols() > members.nrows() {
        return Err(Error::LinearlyDependent { ratio: 0.0 });
    }
    let sv = singular_values(members);
    let ratio = match sv.first() {
        Some(&max) if max > 0.0 => sv[sv.len() - 1] / max,
        _ => 0.0,
    };
    if ratio < INDEPENDENCE_TOL {
        return Err(Error::LinearlyDependent { ratio });
    }
    Ok(())
}

/// Hyperparameters of `C₀(θ) = V diag(1/θ) Vᵀ`, kept inside `[floor, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParamState {
    pub theta: DVector<f64>,
    pub bound: f64,
    pub floor: f64,
}

impl HyperParamState {
    pub fn new(theta: DVector<f64>, bound: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && bound > floor) {
            return Err(Error::InvalidParameter(format!(
                "theta bounds must satisfy 0 < floor < bound, got [{floor}, {bound}]"
            )));
        }
        if theta.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("theta must be positive".into()));
        }
        Ok(Self {
            theta: theta.map(|t| t.clamp(floor, bound)),
            bound,
            floor,
        })
    }

    pub fn clamped(&self) -> DVector<f64> {
        self.theta.map(|t| t.clamp(self.floor, self.bound))
    }
}

/// `C₀(θ)⁻¹ x = V diag(θ) Vᵀ x`.
pub fn hyper_cov_apply_inverse(
    theta: &DVector<f64>,
    basis: &LaplacianEigenbasis,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("hyperparameter vector", basis.dim(), theta.len())?;
    check_dim("hyperparameter operand", basis.dim(), x.len())?;
    if theta.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter("theta must be positive".into()));
    }
    let coeffs = basis.vectors.tr_mul(x).component_mul(theta);
    Ok(&basis.vectors * coeffs)
}
