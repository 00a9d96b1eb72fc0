//! Seeded end-to-end experiments: build the problem, sample truth and data,
//! integrate the flow, solve the reference problem, and check the bounds.

pub mod check;
pub mod config;
pub mod output;
pub mod reproduce;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::darcy::{DarcyForward, GridSpec, ObservationOperator};
use crate::diagnostics::{
    annotate, check_trajectory, estimate_lipschitz, BoundConstants, BoundReport, CheckTolerances,
    LIPSCHITZ_RANDOM_PAIRS,
};
use crate::error::{Error, Result};
use crate::flows::{AdaptiveSettings, FlowParams, FlowState, TekiSystem};
use crate::integrator::{integrate, Trajectory};
use crate::prior::{init_ensemble, sample_prior, HyperParamState, LaplacianEigenbasis, PriorSpec};
use crate::problem::{DifferentiableForward, ForwardModel, InverseProblem, LinearForward};
use crate::reference::{perturbation_certificate, solve_constrained, ConstrainedSolution, SolverOptions};
use crate::subspace::{build_subspace, restricted_min_eigenvalue, SubspaceBasis};

pub use config::{ConfigError, ExperimentConfig, ProblemKind};

/// Independent random streams derived from the ensemble seed.
pub mod streams {
    pub const TRUTH: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const ENSEMBLE: u64 = 2;
    pub const FORWARD: u64 = 3;
    pub const LIPSCHITZ: u64 = 4;
    pub const CERTIFICATE: u64 = 5;
}

/// Perturbation radius and count of the reference-solution certificate.
pub const CERTIFICATE_RADIUS: f64 = 1e-3;
pub const CERTIFICATE_PROBES: usize = 100;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The forward maps an experiment can use.
#[derive(Debug, Clone)]
pub enum Forward {
    Linear(LinearForward),
    Darcy(DarcyForward),
}

impl ForwardModel for Forward {
    fn input_dim(&self) -> usize {
        match self {
            Forward::Linear(f) => f.input_dim(),
            Forward::Darcy(f) => f.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Forward::Linear(f) => f.output_dim(),
            Forward::Darcy(f) => f.output_dim(),
        }
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Forward::Linear(f) => f.evaluate(x),
            Forward::Darcy(f) => f.evaluate(x),
        }
    }
}

impl DifferentiableForward for Forward {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Forward::Linear(f) => f.jacobian(x),
            Forward::Darcy(f) => f.jacobian(x),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("runtime failure: {0}")]
    Runtime(#[from] Error),
}

impl ExperimentError {
    /// 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Everything fixed before integration starts.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: Arc<InverseProblem<Forward>>,
    pub prior: PriorSpec,
    pub truth: DVector<f64>,
    pub initial: FlowState,
    pub basis: SubspaceBasis,
    pub params: FlowParams<Forward>,
}

fn build_forward(cfg: &ExperimentConfig) -> Result<(Forward, Arc<LaplacianEigenbasis>)> {
    let p = &cfg.problem;
    match p.kind {
        ProblemKind::Darcy => {
            let grid = GridSpec::new(p.refinement.unwrap_or(0))?;
            let obs = ObservationOperator::equidistant(&grid, p.observations)?;
            let basis = Arc::new(LaplacianEigenbasis::for_grid(&grid)?);
            Ok((Forward::Darcy(DarcyForward::new(grid, obs)?), basis))
        }
        ProblemKind::Linear => {
            let n = p.dimension.unwrap_or(0);
            let k = p.observations;
            let mut rng = stream(cfg.ensemble.seed, streams::FORWARD);
            let scale = 1.0 / (k as f64).sqrt();
            let a = DMatrix::from_fn(k, n, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            let basis = Arc::new(LaplacianEigenbasis::new(n)?);
            Ok((Forward::Linear(LinearForward::new(a)), basis))
        }
    }
}

/// Problem, truth `u†`, data `y = G(u†) + η`, initial ensemble and subspace.
pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let seed = cfg.ensemble.seed;
    let (forward, eigen) = build_forward(cfg)?;
    let prior = PriorSpec::new(cfg.prior.amplitude, cfg.prior.exponent, eigen.clone())?;
    let (ta, te) = cfg.prior.truth();
    let truth_prior = PriorSpec::new(ta, te, eigen.clone())?;
    let truth = sample_prior(&truth_prior, &mut stream(seed, streams::TRUTH));

    let k = forward.output_dim();
    let sd = cfg.problem.noise_variance.sqrt();
    let mut noise_rng = stream(seed, streams::NOISE);
    let noise = DVector::from_fn(k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut noise_rng);
        z * sd
    });
    let data = forward.evaluate(&truth)? + noise;

    let problem = Arc::new(InverseProblem::new(
        forward,
        data,
        DMatrix::identity(k, k) * cfg.problem.noise_variance,
        prior.covariance(),
        cfg.flow.kappa,
    )?);
    let ensemble = init_ensemble(
        cfg.ensemble.init,
        cfg.ensemble.size,
        &prior,
        &mut stream(seed, streams::ENSEMBLE),
    )?;
    let basis = build_subspace(&ensemble)?;

    let mut params = FlowParams::new(problem.clone(), cfg.flow.rho)?;
    let mut initial = FlowState::new(ensemble);
    if cfg.flow.adaptive {
        let f = &cfg.flow;
        params = params.with_adaptive(AdaptiveSettings {
            basis: eigen,
            bound: f.theta_bound,
            floor: f.theta_floor,
            rate: f.theta_rate,
            per_particle: f.per_particle_theta,
        })?;
        // C₀(θ₀) equals the regularization prior covariance
        let theta0 = HyperParamState::new(prior.mode_precisions(), f.theta_bound, f.theta_floor)?;
        let blocks = params.theta_blocks(cfg.ensemble.size);
        initial = initial.with_theta(vec![theta0; blocks]);
    }
    Ok(Setup {
        problem,
        prior,
        truth,
        initial,
        basis,
        params,
    })
}

/// Outcome of one experiment, in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub setup: Setup,
    /// Annotated with diagnostics at every checkpoint.
    pub trajectory: Trajectory,
    pub constants: BoundConstants,
    pub reference: ConstrainedSolution,
    /// Smallest `Φ_R(u_* + d) − Φ_R(u_*)` over the certificate probes.
    pub certificate: f64,
    pub report: BoundReport,
    pub elapsed: Duration,
}

impl RunResult {
    pub fn phi_star(&self) -> f64 {
        self.reference.value
    }

    /// `‖ū_T − u†‖²`.
    pub fn reconstruction_error(&self) -> f64 {
        (self.trajectory.last().state.ensemble.mean() - &self.setup.truth).norm_squared()
    }

    /// Whether the collapse and eigenvalue bounds are checked: they assume a
    /// fixed regularization.
    pub fn bounds_apply(&self) -> bool {
        !self.config.flow.adaptive
    }
}

/// Solve the restricted reference problem starting from the initial mean.
pub fn reference_solution(setup: &Setup) -> Result<ConstrainedSolution> {
    let start = setup.initial.ensemble.mean();
    let options = SolverOptions {
        tol: 1e-10,
        ..SolverOptions::default_for(0.0)
    };
    solve_constrained(&setup.problem, &setup.basis, &start, options)
}

/// Run an experiment without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> std::result::Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let setup = setup(cfg)?;
    let seed = cfg.ensemble.seed;

    let mut system = TekiSystem::new(setup.params.clone(), &setup.initial)?;
    if cfg.integrator.project {
        system = system.with_projection(setup.basis.container_basis.clone());
    }
    let mut trajectory = integrate(&system, &setup.initial, &cfg.integrator)?;

    let reference = reference_solution(&setup)?;
    let certificate = perturbation_certificate(
        &setup.problem,
        &setup.basis,
        &reference.minimizer,
        CERTIFICATE_RADIUS,
        CERTIFICATE_PROBES,
        &mut stream(seed, streams::CERTIFICATE),
    )?;

    let snapshots: Vec<&DMatrix<f64>> = trajectory
        .checkpoints
        .iter()
        .map(|c| c.state.ensemble.members())
        .collect();
    let c_lip = estimate_lipschitz(
        setup.problem.forward(),
        &snapshots,
        LIPSCHITZ_RANDOM_PAIRS,
        &mut stream(seed, streams::LIPSCHITZ),
    )?;
    let e0 = &setup.initial.ensemble;
    let cov0 = crate::ensemble::compute_stats(e0, &DMatrix::zeros(1, e0.size()))?.cov;
    let constants = BoundConstants::new(
        &setup.problem,
        c_lip,
        e0.spread(),
        restricted_min_eigenvalue(&cov0, &setup.basis),
        cfg.flow.rho,
        e0.size(),
    );
    annotate(&mut trajectory, &setup.problem, &setup.basis, &constants, reference.value)?;
    let report = check_trajectory(
        &trajectory,
        CheckTolerances::for_integrator(cfg.integrator.rel_tol),
        !cfg.flow.adaptive,
    )?;
    Ok(RunResult {
        config: cfg.clone(),
        setup,
        trajectory,
        constants,
        reference,
        certificate,
        report,
        elapsed: started.elapsed(),
    })
}

/// Execute and write all artifacts under the configured output directory.
/// On a runtime failure an `error.txt` is written there before returning.
pub fn run(cfg: &ExperimentConfig) -> std::result::Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let dir = cfg.output.directory.clone();
    std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
    match execute(cfg) {
        Ok(result) => {
            output::write_artifacts(&result, &dir)?;
            Ok(result)
        }
        Err(err) => {
            let dump = format!("{err}\n\nresolved configuration:\n{}", cfg.to_toml());
            let path = dir.join("error.txt");
            std::fs::write(&path, dump).map_err(|e| ExperimentError::io(&path, e))?;
            Err(err)
        }
    }
}

/// Load, validate and [`run`] a configuration file.
pub fn run_path(path: &Path) -> std::result::Result<RunResult, ExperimentError> {
    run(&ExperimentConfig::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn linear_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(include_str!("../../../../configs/linear_small.toml")).unwrap();
        c.output.directory = dir.to_path_buf();
        c
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        use rand::Rng;
        let a: f64 = stream(3, streams::TRUTH).random();
        let b: f64 = stream(3, streams::NOISE).random();
        let a2: f64 = stream(3, streams::TRUTH).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn setup_data_is_consistent() {
        let cfg = linear_config(Path::new("unused"));
        let s = setup(&cfg).unwrap();
        assert_eq!(s.truth.len(), 10);
        let resid = s.problem.data() - s.problem.forward().evaluate(&s.truth).unwrap();
        // noise of variance 0.01 in 20 components
        assert!(resid.norm() < 1.0 && resid.norm() > 0.0);
        assert_eq!(s.initial.ensemble.size(), 5);
        assert!(s.initial.theta.is_empty());
    }

    #[test]
    fn linear_small_runs_and_passes_checks() {
        let cfg = linear_config(Path::new("unused"));
        let r = execute(&cfg).unwrap();
        assert!(r.report.passed(), "{:?}", r.report);
        assert_eq!(r.trajectory.checkpoints.len(), cfg.integrator.checkpoints);
        assert!(r.reference.kkt_residual <= 1e-8);
        assert!(r.certificate >= 0.0);
        assert!(r.elapsed < Duration::from_secs(10));
    }
}
