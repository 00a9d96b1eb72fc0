//! Right-hand sides of the ensemble Kalman particle dynamics.
//!
//! Every drift is evaluated in the factored form `(1/J) E M`, where `E` holds
//! the spread vectors as columns and `M` is a `J × J` coefficient matrix.
//! The drift therefore lies in the span of the current spread by
//! construction, which is what keeps trajectories inside their initial
//! affine subspace.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{self, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::integrator::OdeSystem;
use crate::linalg::SpdFactor;
use crate::prior::{HyperParamState, LaplacianEigenbasis};
use crate::problem::{ForwardModel, InverseProblem};

/// Hyperparameter flow for `C₀(θ) = V diag(1/θ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct AdaptiveSettings {
    pub basis: Arc<LaplacianEigenbasis>,
    pub bound: f64,
    pub floor: f64,
    /// Time-scale multiplier of the θ-flow relative to the particle flow.
    pub rate: f64,
    /// One θ per particle, each driven by its own particle, instead of a
    /// single θ driven by the ensemble mean.
    pub per_particle: bool,
}

#[derive(Debug, Clone)]
pub struct FlowParams<F> {
    problem: Arc<InverseProblem<F>>,
    rho: f64,
    adaptive: Option<AdaptiveSettings>,
}

impl<F: ForwardModel> FlowParams<F> {
    /// `ρ ∈ [0, 1)`; inflation without regularization (`κ = 0, ρ > 0`) is
    /// rejected.
    pub fn new(problem: Arc<InverseProblem<F>>, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidParameter(format!(
                "rho must be in [0, 1), got {rho}"
            )));
        }
        if problem.kappa() == 0.0 && rho > 0.0 {
            return Err(Error::InvalidParameter(
                "covariance inflation requires kappa > 0".into(),
            ));
        }
        Ok(Self {
            problem,
            rho,
            adaptive: None,
        })
    }

    pub fn with_adaptive(mut self, settings: AdaptiveSettings) -> Result<Self> {
        check_dim(
            "adaptive eigenbasis",
            self.problem.input_dim(),
            settings.basis.dim(),
        )?;
        if !(settings.floor > 0.0 && settings.bound > settings.floor && settings.rate > 0.0) {
            return Err(Error::InvalidParameter(
                "adaptive settings need 0 < floor < bound and rate > 0".into(),
            ));
        }
        self.adaptive = Some(settings);
        Ok(self)
    }

    pub fn problem(&self) -> &Arc<InverseProblem<F>> {
        &self.problem
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn kappa(&self) -> f64 {
        self.problem.kappa()
    }

    pub fn adaptive(&self) -> Option<&AdaptiveSettings> {
        self.adaptive.as_ref()
    }

    /// Number of θ vectors carried by the flow state.
    pub fn theta_blocks(&self, ensemble_size: usize) -> usize {
        match &self.adaptive {
            None => 0,
            Some(a) if a.per_particle => ensemble_size,
            Some(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub ensemble: Ensemble,
    /// Empty unless the flow is adaptive.
    pub theta: Vec<HyperParamState>,
    pub time: f64,
}

impl FlowState {
    pub fn new(ensemble: Ensemble) -> Self {
        Self {
            ensemble,
            theta: Vec::new(),
            time: 0.0,
        }
    }

    pub fn with_theta(mut self, theta: Vec<HyperParamState>) -> Self {
        self.theta = theta;
        self
    }
}

/// Time derivative of a [`FlowState`].
#[derive(Debug, Clone)]
pub struct FlowDerivative {
    pub ensemble: DMatrix<f64>,
    pub theta: Vec<DVector<f64>>,
}

/// Factored drift `(1/J) E (Dᵀ Γ⁻¹ R − Eᵀ Z)`.
///
/// `residuals` holds `y − G(u^(j)) + ρ (G(u^(j)) − Ḡ)` per column and
/// `reg_terms` the already-regularized vectors `R_j (u^(j) − ρ e^(j))`.
fn factored_drift(
    spreads: &DMatrix<f64>,
    g_spreads: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    reg_terms: &DMatrix<f64>,
    noise: &SpdFactor,
) -> DMatrix<f64> {
    let j = spreads.ncols() as f64;
    let weighted = noise.solve_matrix(residuals);
    let coeffs = g_spreads.tr_mul(&weighted) - spreads.tr_mul(reg_terms);
    spreads * coeffs / j
}

fn data_residuals(
    g: &DMatrix<f64>,
    g_spreads: &DMatrix<f64>,
    y: &DVector<f64>,
    rho: f64,
) -> DMatrix<f64> {
    let mut r = g_spreads * rho - g;
    for mut c in r.column_iter_mut() {
        c += y;
    }
    r
}

/// Drift of the (inflated) TEKI flow with fixed regularization `κ C₀⁻¹`:
///
/// `C^{uG} Γ⁻¹ (y − G_j) − κ C C₀⁻¹ u_j + ρ [C^{uG} Γ⁻¹ (G_j − Ḡ) + κ C C₀⁻¹ (u_j − ū)]`.
///
/// `κ = 0, ρ = 0` is plain deterministic EKI.
pub fn teki_rhs<F: ForwardModel>(state: &FlowState, params: &FlowParams<F>) -> Result<FlowDerivative> {
    let problem = &params.problem;
    let u = state.ensemble.members();
    check_dim("ensemble dimension", problem.input_dim(), u.nrows())?;
    let g = problem.forward().evaluate_columns(u)?;
    let spreads = state.ensemble.deviations();
    let g_spreads = ensemble::deviations(&g);
    let residuals = data_residuals(&g, &g_spreads, problem.data(), params.rho);
    let shrunk = u - &spreads * params.rho;
    let reg_terms = if problem.kappa() == 0.0 {
        DMatrix::zeros(u.nrows(), u.ncols())
    } else {
        problem.reg().solve_matrix(&shrunk) * problem.kappa()
    };
    Ok(FlowDerivative {
        ensemble: factored_drift(&spreads, &g_spreads, &residuals, &reg_terms, problem.noise()),
        theta: Vec::new(),
    })
}

/// Gradient of `½ Σ θ_i v_i² − ½ Σ log θ_i` with respect to `θ`, negated
/// and scaled by `rate`, then projected so `θ` stays inside its box.
pub fn theta_drift(state: &HyperParamState, v: &DVector<f64>, rate: f64) -> DVector<f64> {
    let theta = state.clamped();
    DVector::from_fn(theta.len(), |i, _| {
        let d = rate * (0.5 / theta[i] - 0.5 * v[i] * v[i]);
        if (theta[i] <= state.floor && d < 0.0) || (theta[i] >= state.bound && d > 0.0) {
            0.0
        } else {
            d
        }
    })
}

/// The hierarchical flow: particles see `C₀(θ)⁻¹` in place of `κ C₀⁻¹`, and
/// `θ` follows the gradient flow of `½‖ū‖²_{C₀(θ)} + ½ log det C₀(θ)`.
pub fn adaptive_rhs<F: ForwardModel>(
    state: &FlowState,
    params: &FlowParams<F>,
) -> Result<FlowDerivative> {
    let settings = params.adaptive.as_ref().ok_or_else(|| {
        Error::InvalidParameter("adaptive_rhs called without adaptive settings".into())
    })?;
    let problem = &params.problem;
    let u = state.ensemble.members();
    let (n, jn) = (u.nrows(), u.ncols());
    check_dim("ensemble dimension", problem.input_dim(), n)?;
    check_dim("theta blocks", params.theta_blocks(jn), state.theta.len())?;
    let vt = settings.basis.vectors();

    let g = problem.forward().evaluate_columns(u)?;
    let spreads = state.ensemble.deviations();
    let g_spreads = ensemble::deviations(&g);
    let residuals = data_residuals(&g, &g_spreads, problem.data(), params.rho);
    let shrunk = u - &spreads * params.rho;

    let thetas: Vec<DVector<f64>> = state.theta.iter().map(HyperParamState::clamped).collect();
    let mut coeffs = vt.tr_mul(&shrunk);
    for (j, mut c) in coeffs.column_iter_mut().enumerate() {
        let theta = if settings.per_particle { &thetas[j] } else { &thetas[0] };
        c.component_mul_assign(theta);
    }
    let reg_terms = vt * coeffs;

    let theta = if settings.per_particle {
        let proj = vt.tr_mul(u);
        state
            .theta
            .iter()
            .enumerate()
            .map(|(j, s)| theta_drift(s, &proj.column(j).into_owned(), settings.rate))
            .collect()
    } else {
        let v = vt.tr_mul(&state.ensemble.mean());
        vec![theta_drift(&state.theta[0], &v, settings.rate)]
    };

    Ok(FlowDerivative {
        ensemble: factored_drift(&spreads, &g_spreads, &residuals, &reg_terms, problem.noise()),
        theta,
    })
}

/// Dispatch on whether the flow is adaptive.
pub fn flow_rhs<F: ForwardModel>(state: &FlowState, params: &FlowParams<F>) -> Result<FlowDerivative> {
    if params.adaptive.is_some() {
        adaptive_rhs(state, params)
    } else {
        teki_rhs(state, params)
    }
}

/// One step of the discrete ensemble Kalman iteration with perturbed
/// observations `y + ξ^(j)` (columns of `perturbations`):
///
/// `u^(j) ← u^(j) + C^{uG} (C^{GG} + h⁻¹ Γ)⁻¹ (y + ξ^(j) − G(u^(j)))`.
pub fn discrete_eki_step<F: ForwardModel>(
    ensemble: &Ensemble,
    problem: &InverseProblem<F>,
    step: f64,
    perturbations: &DMatrix<f64>,
) -> Result<Ensemble> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {step}"
        )));
    }
    check_dim("perturbation count", ensemble.size(), perturbations.ncols())?;
    check_dim("perturbation length", problem.output_dim(), perturbations.nrows())?;
    let g = problem.forward().evaluate_columns(ensemble.members())?;
    let stats = ensemble::compute_stats(ensemble, &g)?;
    let gain_system = &stats.out_cov + problem.noise().matrix() / step;
    let gain = SpdFactor::new(gain_system, "innovation covariance")
        .expect("C^GG + Γ/h is positive definite for Γ ≻ 0");
    let mut innov = perturbations - &g;
    for mut c in innov.column_iter_mut() {
        c += problem.data();
    }
    let update = &stats.cross_cov * gain.solve_matrix(&innov);
    Ensemble::new(ensemble.members() + update)
}

/// A flow packaged for the ODE integrator. State layout: ensemble members
/// column-major (`n_x · J` values), then each θ block (`n_x` values).
#[derive(Debug, Clone)]
pub struct TekiSystem<F> {
    params: FlowParams<F>,
    dim: usize,
    size: usize,
    theta_template: Vec<HyperParamState>,
    projector: Option<DMatrix<f64>>,
}

impl<F: ForwardModel> TekiSystem<F> {
    pub fn new(params: FlowParams<F>, initial: &FlowState) -> Result<Self> {
        let dim = initial.ensemble.dim();
        let size = initial.ensemble.size();
        check_dim("ensemble dimension", params.problem.input_dim(), dim)?;
        check_dim("theta blocks", params.theta_blocks(size), initial.theta.len())?;
        Ok(Self {
            params,
            dim,
            size,
            theta_template: initial.theta.clone(),
            projector: None,
        })
    }

    /// Re-project the ensemble onto the span of the columns of `basis`
    /// (orthonormal) after every accepted step.
    pub fn with_projection(mut self, basis: DMatrix<f64>) -> Self {
        self.projector = Some(basis);
        self
    }

    pub fn params(&self) -> &FlowParams<F> {
        &self.params
    }

    pub fn projects(&self) -> bool {
        self.projector.is_some()
    }

    pub fn pack(&self, state: &FlowState) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.state_len());
        y.extend_from_slice(state.ensemble.members().as_slice());
        for t in &state.theta {
            y.extend_from_slice(t.theta.as_slice());
        }
        y
    }

    pub fn unpack(&self, y: &[f64], time: f64) -> Result<FlowState> {
        let m = self.dim * self.size;
        let ensemble = Ensemble::new(DMatrix::from_column_slice(self.dim, self.size, &y[..m]))?;
        let theta = self
            .theta_template
            .iter()
            .enumerate()
            .map(|(b, tpl)| {
                let block = &y[m + b * self.dim..m + (b + 1) * self.dim];
                HyperParamState {
                    theta: DVector::from_column_slice(block),
                    bound: tpl.bound,
                    floor: tpl.floor,
                }
            })
            .collect();
        Ok(FlowState {
            ensemble,
            theta,
            time,
        })
    }

    fn state_len(&self) -> usize {
        self.dim * (self.size + self.theta_template.len())
    }
}

impl<F: ForwardModel> OdeSystem for TekiSystem<F> {
    fn dim(&self) -> usize {
        self.state_len()
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let state = self.unpack(y, t)?;
        let d = flow_rhs(&state, &self.params)?;
        let m = self.dim * self.size;
        dy[..m].copy_from_slice(d.ensemble.as_slice());
        for (b, block) in d.theta.iter().enumerate() {
            dy[m + b * self.dim..m + (b + 1) * self.dim].copy_from_slice(block.as_slice());
        }
        Ok(())
    }

    fn project(&self, y: &mut [f64]) {
        if let Some(q) = &self.projector {
            let m = self.dim * self.size;
            let u = DMatrix::from_column_slice(self.dim, self.size, &y[..m]);
            let p = q * q.tr_mul(&u);
            y[..m].copy_from_slice(p.as_slice());
        }
    }
}
