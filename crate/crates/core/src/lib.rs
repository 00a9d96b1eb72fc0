//! Tikhonov-regularized ensemble Kalman inversion in continuous time.

pub mod darcy;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod flows;
pub mod integrator;
pub mod linalg;
pub mod prior;
pub mod problem;
pub mod reference;
pub mod subspace;

pub use ensemble::{compute_stats, Ensemble, EnsembleStats};
pub use error::{Error, Result};
pub use flows::{FlowParams, FlowState, TekiSystem};
pub use integrator::{integrate, IntegratorConfig, Trajectory};
pub use problem::{DifferentiableForward, ForwardModel, InverseProblem, LinearForward};
