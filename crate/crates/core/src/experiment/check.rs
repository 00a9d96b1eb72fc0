//! The invariant suite behind the `check` subcommand.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{run, ExperimentConfig, ExperimentError, RunResult};
use crate::diagnostics::{annotate, check_trajectory, CheckTolerances};
use crate::error::Result;
use crate::flows::{teki_rhs, FlowParams, FlowState};
use crate::linalg::orthonormal_range;

/// KKT tolerance for the reference solution.
pub const KKT_TOL: f64 = 1e-8;
/// Relative tolerance of the mean-drift invariance under inflation.
pub const MEAN_INVARIANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub checks: Vec<CheckItem>,
}

impl Verdict {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("verdict serializes")
    }
}

fn item(name: &str, passed: bool, detail: String) -> CheckItem {
    CheckItem {
        name: name.into(),
        passed,
        detail,
    }
}

/// Move one particle of the final checkpoint off the initial member span and
/// recompute the diagnostics. Used as a negative control.
pub fn corrupt(result: &mut RunResult) -> Result<()> {
    let last = result.trajectory.checkpoints.len() - 1;
    let members = result.trajectory.checkpoints[last].state.ensemble.members().clone();
    let n = members.nrows();
    let span = orthonormal_range(result.setup.initial.ensemble.members(), 1e-10);
    let mut kick = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 });
    kick -= &span * span.tr_mul(&kick);
    if kick.norm() == 0.0 {
        kick = DVector::from_element(n, 1.0);
    }
    let mut corrupted = members;
    let col = corrupted.column(0) + kick.normalize() * 1e-2;
    corrupted.set_column(0, &col);
    let cp = &mut result.trajectory.checkpoints[last];
    cp.state.ensemble = crate::ensemble::Ensemble::new(corrupted)?;
    annotate(
        &mut result.trajectory,
        &result.setup.problem,
        &result.setup.basis,
        &result.constants,
        result.reference.value,
    )?;
    result.report = check_trajectory(
        &result.trajectory,
        CheckTolerances::for_integrator(result.config.integrator.rel_tol),
        result.bounds_apply(),
    )?;
    Ok(())
}

fn mean_invariance(result: &RunResult) -> Result<Option<f64>> {
    if result.config.flow.adaptive || result.setup.problem.kappa() == 0.0 {
        return Ok(None);
    }
    let plain = FlowParams::new(result.setup.problem.clone(), 0.0)?;
    let inflated = FlowParams::new(result.setup.problem.clone(), 0.8)?;
    let mut worst: f64 = 0.0;
    for cp in &result.trajectory.checkpoints {
        let state = FlowState::new(cp.state.ensemble.clone());
        let a = teki_rhs(&state, &plain)?.ensemble.column_mean();
        let b = teki_rhs(&state, &inflated)?.ensemble.column_mean();
        worst = worst.max((a - &b).norm() / b.norm().max(f64::MIN_POSITIVE));
    }
    Ok(Some(worst))
}

/// Evaluate the invariant suite on a finished run.
pub fn evaluate(result: &RunResult) -> Result<Verdict> {
    let mut checks = Vec::new();
    let rep = &result.report;
    let count = result.config.integrator.checkpoints;
    checks.push(item(
        "checkpoint_count",
        result.trajectory.checkpoints.len() == count && rep.rows.len() == count,
        format!("{} rows, expected {count}", result.trajectory.checkpoints.len()),
    ));
    if result.bounds_apply() {
        checks.push(item(
            "spread_bound",
            rep.spread_failures() == 0,
            format!("{} violating checkpoints", rep.spread_failures()),
        ));
        checks.push(item(
            "zeta_bound",
            rep.zeta_failures() == 0,
            format!("{} violating checkpoints", rep.zeta_failures()),
        ));
    }
    let nonpositive = rep.rows.iter().filter(|r| !r.zeta_positive).count();
    checks.push(item(
        "zeta_positive",
        nonpositive == 0,
        format!("{nonpositive} checkpoints with zeta <= 0"),
    ));
    let max_drift = super::output::records(result)
        .iter()
        .map(|r| r.subspace_drift)
        .fold(0.0, f64::max);
    checks.push(item(
        "subspace_drift",
        rep.drift_failures() == 0,
        format!("max drift {max_drift:e}"),
    ));
    let kkt = result.reference.kkt_residual;
    checks.push(item("reference_kkt", kkt <= KKT_TOL, format!("residual {kkt:e}")));
    let slack = 1e-12 * (1.0 + result.phi_star().abs());
    checks.push(item(
        "reference_certificate",
        result.certificate >= -slack,
        format!("smallest increase {:e}", result.certificate),
    ));
    if let Some(worst) = mean_invariance(result)? {
        checks.push(item(
            "inflation_mean_invariance",
            worst <= MEAN_INVARIANCE_TOL,
            format!("max relative difference {worst:e}"),
        ));
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(Verdict { passed, checks })
}

/// Run a configuration, evaluate the suite, and write `verdict.toml` into the
/// output directory. `corrupt_trajectory` applies [`corrupt`] first.
pub fn check(cfg: &ExperimentConfig, corrupt_trajectory: bool) -> std::result::Result<Verdict, ExperimentError> {
    let mut result = run(cfg)?;
    if corrupt_trajectory {
        corrupt(&mut result)?;
    }
    let verdict = evaluate(&result)?;
    let path = cfg.output.directory.join("verdict.toml");
    std::fs::write(&path, verdict.to_toml()).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(verdict)
}

pub fn check_path(path: &Path, corrupt_trajectory: bool) -> std::result::Result<Verdict, ExperimentError> {
    check(&ExperimentConfig::load(path)?, corrupt_trajectory)
}
