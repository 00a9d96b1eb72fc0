use std::path::Path;

use approx::assert_relative_eq;

use teki::experiment::check::{check, KKT_TOL};
use teki::experiment::output::{rerun_from_manifest, Manifest, TRAJECTORY_HEADER};
use teki::experiment::reproduce::{reproduce, Figure, Scale};
use teki::experiment::{
    execute, reference_solution, run, run_path, setup, ExperimentConfig, ExperimentError,
};

const LINEAR_SMALL: &str = include_str!("../../../configs/linear_small.toml");

fn linear_small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(LINEAR_SMALL).unwrap();
    cfg.output.directory = dir.to_path_buf();
    cfg
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn bundled_configs_validate() {
    for name in ["linear_small", "darcy_desk", "adaptive_desk"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}.toml"));
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run_path(&tmp.path().join("nope.toml")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, LINEAR_SMALL.replace("rho = 0.0", "rho = 1.0")).unwrap();
    let err = run_path(&bad).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match err {
        ExperimentError::Config(c) => assert_eq!(c.field, "flow.rho"),
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn artifacts_have_one_row_per_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = linear_small(tmp.path());
    let r = run(&cfg).unwrap();
    let n = cfg.integrator.checkpoints;
    let traj = lines(&tmp.path().join("trajectory.csv"));
    assert_eq!(traj[0], TRAJECTORY_HEADER.join(","));
    assert_eq!(traj.len(), n + 1);
    assert_eq!(lines(&tmp.path().join("bounds.csv")).len(), n + 1);
    let est = lines(&tmp.path().join("estimates.csv"));
    assert_eq!(est.len(), n + 1);
    assert_eq!(est[0].split(',').count(), 1 + cfg.dimension());
    assert!(tmp.path().join("plot.py").exists());

    // the collapse bound starts at the initial spread
    let first = r.trajectory.checkpoints[0].diagnostics.as_ref().unwrap();
    assert_relative_eq!(first.spread_upper_bound, first.v_e, max_relative = 1e-14);
}

#[test]
fn manifest_round_trips_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    run(&linear_small(tmp.path())).unwrap();
    let path = tmp.path().join("manifest.toml");
    let m = Manifest::load(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), m);
    assert_eq!(m.to_toml(), std::fs::read_to_string(&path).unwrap());

    let again = rerun_from_manifest(&path).unwrap();
    assert_eq!(Manifest::from_result(&again), m);
}

#[test]
fn check_passes_and_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = linear_small(&tmp.path().join("clean"));
    let clean = check(&cfg, false).unwrap();
    assert!(clean.passed, "{clean:?}");
    assert!(cfg.output.directory.join("verdict.toml").exists());

    let cfg = linear_small(&tmp.path().join("corrupt"));
    let corrupt = check(&cfg, true).unwrap();
    assert!(!corrupt.passed);
    let drift = corrupt.checks.iter().find(|c| c.name == "subspace_drift").unwrap();
    assert!(!drift.passed);
}

#[test]
fn subspace_optimum_improves_with_ensemble_size() {
    // Random members with one seed are nested across J, so the affine hulls are
    // too, and the restricted minimum cannot increase.
    let mut previous = f64::INFINITY;
    for size in [2, 4, 6, 8, 10] {
        let mut cfg = ExperimentConfig::from_toml(LINEAR_SMALL).unwrap();
        cfg.ensemble.size = size;
        let s = setup(&cfg).unwrap();
        let r = reference_solution(&s).unwrap();
        assert!(r.kkt_residual <= KKT_TOL);
        assert!(r.value <= previous * (1.0 + 1e-10), "J = {size}: {} > {previous}", r.value);
        previous = r.value;
    }
}

#[test]
fn inflation_leaves_the_linear_reference_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = execute(&linear_small(tmp.path())).unwrap();
    let mut cfg = linear_small(tmp.path());
    cfg.flow.rho = 0.5;
    let inflated = execute(&cfg).unwrap();
    assert_eq!(plain.phi_star(), inflated.phi_star());
    assert_eq!(plain.setup.basis.container_basis, inflated.setup.basis.container_basis);
}

#[test]
fn spread_figure_stays_under_its_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let rep = reproduce(Figure::Spread, Scale::Desk, tmp.path()).unwrap();
    assert!(!rep.runs.is_empty());
    for (label, r) in &rep.runs {
        assert_eq!(r.report.spread_failures(), 0, "{label}");
        assert_eq!(r.report.drift_failures(), 0, "{label}");
    }
    for f in &rep.files {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    assert!(tmp.path().join("plot.py").exists());
}
