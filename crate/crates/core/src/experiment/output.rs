//! CSV, manifest and plot-script emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{execute, ExperimentConfig, ExperimentError, RunResult};
use crate::diagnostics::{BoundReport, DiagnosticsRecord};
use crate::integrator::SolverStats;

pub const TRAJECTORY_HEADER: [&str; 12] = [
    "t",
    "V_e",
    "spread_bound",
    "zeta",
    "zeta_bound",
    "loss_mean",
    "loss_particle_avg",
    "loss_gap",
    "grad_approx_err",
    "subspace_drift",
    "theta_min",
    "theta_max",
];

pub const BOUNDS_HEADER: [&str; 5] = ["t", "spread_ok", "zeta_ok", "zeta_positive", "drift_ok"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_verdict(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

/// Build a CSV document from a header and rows of preformatted cells.
pub fn csv<S: AsRef<str>>(header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn trajectory_csv(records: &[DiagnosticsRecord]) -> String {
    csv(
        &TRAJECTORY_HEADER,
        records.iter().map(|r| {
            vec![
                fmt_f64(r.time),
                fmt_f64(r.v_e),
                fmt_f64(r.spread_upper_bound),
                fmt_f64(r.zeta),
                fmt_f64(r.zeta_lower_bound),
                fmt_f64(r.loss_mean),
                fmt_f64(r.loss_particle_avg),
                fmt_f64(r.loss_gap),
                fmt_f64(r.grad_approx_error),
                fmt_f64(r.subspace_drift),
                fmt_opt(r.theta_min),
                fmt_opt(r.theta_max),
            ]
        }),
    )
}

pub fn bounds_csv(report: &BoundReport) -> String {
    csv(
        &BOUNDS_HEADER,
        report.rows.iter().map(|r| {
            vec![
                fmt_f64(r.time),
                fmt_verdict(r.spread_ok).into(),
                fmt_verdict(r.zeta_ok).into(),
                fmt_verdict(Some(r.zeta_positive)).into(),
                fmt_verdict(Some(r.drift_ok)).into(),
            ]
        }),
    )
}

/// `t` followed by the ensemble mean at every checkpoint.
pub fn estimates_csv(result: &RunResult) -> String {
    let n = result.setup.truth.len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("u_{i}")));
    csv(
        &header,
        result.trajectory.checkpoints.iter().map(|c| {
            std::iter::once(fmt_f64(c.time))
                .chain(c.state.ensemble.mean().iter().map(|&v| fmt_f64(v)))
                .collect()
        }),
    )
}

pub fn records(result: &RunResult) -> Vec<DiagnosticsRecord> {
    result
        .trajectory
        .checkpoints
        .iter()
        .filter_map(|c| c.diagnostics.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub truth_stream: u64,
    pub noise_stream: u64,
    pub ensemble_stream: u64,
    pub forward_stream: u64,
    pub lipschitz_stream: u64,
    pub certificate_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsRecord {
    pub c_lip: f64,
    pub v_e0: f64,
    pub zeta0: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub lambda_max: f64,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub phi_star: f64,
    pub kkt_residual: f64,
    pub offset_derivative: f64,
    pub iterations: usize,
    pub certificate_min_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorsRecord {
    pub data: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Everything needed to re-run an experiment and audit its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub constants: ConstantsRecord,
    pub reference: ReferenceRecord,
    pub solver: SolverStats,
    pub vectors: VectorsRecord,
}

impl Manifest {
    pub fn from_result(r: &RunResult) -> Self {
        use super::streams;
        let c = &r.constants;
        Self {
            config: r.config.clone(),
            seeds: SeedRecord {
                seed: r.config.ensemble.seed,
                truth_stream: streams::TRUTH,
                noise_stream: streams::NOISE,
                ensemble_stream: streams::ENSEMBLE,
                forward_stream: streams::FORWARD,
                lipschitz_stream: streams::LIPSCHITZ,
                certificate_stream: streams::CERTIFICATE,
            },
            constants: ConstantsRecord {
                c_lip: c.c_lip,
                v_e0: c.v_e0,
                zeta0: c.zeta0,
                sigma_min: c.sigma_min,
                sigma_max: c.sigma_max,
                lambda_max: c.lambda_max,
                m: c.m,
            },
            reference: ReferenceRecord {
                phi_star: r.reference.value,
                kkt_residual: r.reference.kkt_residual,
                offset_derivative: r.reference.offset_derivative,
                iterations: r.reference.iterations,
                certificate_min_increase: r.certificate,
            },
            solver: r.trajectory.stats.clone(),
            vectors: VectorsRecord {
                data: r.setup.problem.data().iter().copied().collect(),
                truth: r.setup.truth.iter().copied().collect(),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| {
            ExperimentError::Config(super::ConfigError {
                field: String::new(),
                message: format!("invalid manifest {}: {e}", path.display()),
            })
        })?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Re-execute the configuration recorded in a manifest. The regenerated data
/// must match the recorded data exactly.
pub fn rerun(manifest: &Manifest) -> Result<RunResult, ExperimentError> {
    let result = execute(&manifest.config)?;
    let data: Vec<f64> = result.setup.problem.data().iter().copied().collect();
    if data != manifest.vectors.data {
        return Err(ExperimentError::Runtime(crate::error::Error::InvalidParameter(
            "regenerated data differs from the manifest".into(),
        )));
    }
    Ok(result)
}

pub fn rerun_from_manifest(path: &Path) -> Result<RunResult, ExperimentError> {
    rerun(&Manifest::load(path)?)
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

/// `trajectory.csv`, `bounds.csv`, `estimates.csv`, `manifest.toml` and,
/// if enabled, `plot.py`.
pub fn write_artifacts(result: &RunResult, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    write(&dir.join("trajectory.csv"), &trajectory_csv(&records(result)))?;
    write(&dir.join("bounds.csv"), &bounds_csv(&result.report))?;
    write(&dir.join("estimates.csv"), &estimates_csv(result))?;
    write(&dir.join("manifest.toml"), &Manifest::from_result(result).to_toml())?;
    if result.config.output.plot_script {
        write(&dir.join("plot.py"), &run_plot_script())?;
    }
    Ok(())
}

/// Plot script for a single run directory.
pub fn run_plot_script() -> String {
    r#"# Plots the CSVs written next to this script.
import csv
import os
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))


def load(name):
    with open(os.path.join(here, name)) as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) if r[k] else float("nan") for r in rows] for k in rows[0]}


tr = load("trajectory.csv")
t = tr["t"][1:]
fig, ax = plt.subplots(1, 3, figsize=(15, 4))
ax[0].loglog(t, tr["V_e"][1:], label="V_e")
ax[0].loglog(t, tr["spread_bound"][1:], "--", label="bound")
ax[0].set_title("particle spread")
ax[1].loglog(t, tr["zeta"][1:], label="zeta")
ax[1].loglog(t, tr["zeta_bound"][1:], "--", label="bound")
ax[1].set_title("restricted eigenvalue")
ax[2].loglog(t, [max(g, 1e-300) for g in tr["loss_gap"][1:]], label="loss gap")
ax[2].set_title("loss gap")
for a in ax:
    a.set_xlabel("t")
    a.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "trajectory.png"), dpi=150)
"#
    .to_string()
}

/// Plot script for a `reproduce` directory: one line per CSV, log-log unless
/// the first column is the spatial coordinate.
pub fn figure_plot_script(title: &str, files: &[String]) -> String {
    let mut list = String::new();
    for f in files {
        let _ = writeln!(list, "    {f:?},");
    }
    format!(
        r#"# Plots every curve of the "{title}" figure.
import csv
import os
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
files = [
{list}]

fig, ax = plt.subplots(figsize=(7, 5))
for name in files:
    with open(os.path.join(here, name)) as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    x = [float(r[0]) for r in body]
    for col in range(1, len(header)):
        y = [float(r[col]) for r in body]
        if header[0] == "t":
            pairs = [(a, b) for a, b in zip(x, y) if a > 0 and b > 0]
            ax.loglog([p[0] for p in pairs], [p[1] for p in pairs], label=f"{{name}}:{{header[col]}}")
        else:
            ax.plot(x, y, label=f"{{name}}:{{header[col]}}")
ax.set_title("{title}")
ax.legend(fontsize=6)
fig.tight_layout()
fig.savefig(os.path.join(here, "{title}.png"), dpi=150)
"#
    )
}
