//! Regenerate the curves of each experiment figure from paired runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::config::{
    EnsembleSection, FlowSection, OutputSection, PriorSection, ProblemSection,
};
use super::output::{csv, figure_plot_script, fmt_f64, records, write_artifacts};
use super::{execute, ExperimentConfig, ExperimentError, ProblemKind, RunResult};
use crate::integrator::IntegratorConfig;
use crate::prior::InitStrategy;

pub const RHO_VALUES: [f64; 4] = [0.0, 0.25, 0.5, 0.8];
pub const ENSEMBLE_SIZES: [usize; 3] = [5, 20, 50];
/// Fixed regularization scales the adaptive scheme is compared against.
pub const ADAPTIVE_COMPARISON_KAPPAS: [f64; 2] = [1.0, 0.001];
pub const DEFAULT_SEED: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Spread,
    Loss,
    LossGap,
    Estimate,
    Adaptive,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Spread => "spread",
            Figure::Loss => "loss",
            Figure::LossGap => "loss-gap",
            Figure::Estimate => "estimate",
            Figure::Adaptive => "adaptive",
        }
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spread" => Ok(Figure::Spread),
            "loss" => Ok(Figure::Loss),
            "loss-gap" => Ok(Figure::LossGap),
            "estimate" => Ok(Figure::Estimate),
            "adaptive" => Ok(Figure::Adaptive),
            _ => Err(format!("unknown figure {s:?}")),
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// `r = 8`, `T = 10⁷`.
    Paper,
    /// `r = 6`, `T = 10⁴`.
    Desk,
}

impl Scale {
    pub fn refinement(self) -> u32 {
        match self {
            Scale::Paper => 8,
            Scale::Desk => 6,
        }
    }

    pub fn t_final(self) -> f64 {
        match self {
            Scale::Paper => 1e7,
            Scale::Desk => 1e4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale {s:?}")),
        }
    }
}

fn init_name(init: InitStrategy) -> &'static str {
    match init {
        InitStrategy::Basis => "basis",
        InitStrategy::Random => "random",
    }
}

/// The fixed-regularization Darcy experiment: `β = 10`, `α = 1`,
/// `Γ = 0.01 I`, `κ = 10⁻⁴`, `K = 31`.
pub fn darcy_config(scale: Scale, size: usize, init: InitStrategy, rho: f64, dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        problem: ProblemSection {
            kind: ProblemKind::Darcy,
            refinement: Some(scale.refinement()),
            dimension: None,
            observations: 31,
            noise_variance: 0.01,
        },
        prior: PriorSection {
            amplitude: 10.0,
            exponent: 1.0,
            truth_amplitude: None,
            truth_exponent: None,
        },
        ensemble: EnsembleSection {
            size,
            init,
            seed: DEFAULT_SEED,
        },
        flow: FlowSection {
            rho,
            kappa: 1e-4,
            adaptive: false,
            theta_bound: 1e6,
            theta_floor: 1e-6,
            theta_rate: 1.0,
            per_particle_theta: false,
        },
        integrator: IntegratorConfig {
            t_final: scale.t_final(),
            ..IntegratorConfig::default()
        },
        output: OutputSection {
            directory: dir,
            plot_script: true,
        },
    }
}

/// The misspecified-prior experiment: truth from `(−Δ)^{−2}`, regularization
/// built on `C_fix = (−Δ)^{−1}`, random initialization from `N(0, C_fix)`.
/// `kappa = None` gives the adaptive scheme with `C₀(θ₀) = C_fix`.
pub fn adaptive_config(scale: Scale, kappa: Option<f64>, dir: PathBuf) -> ExperimentConfig {
    let size = match scale {
        Scale::Paper => 100,
        Scale::Desk => 20,
    };
    let mut cfg = darcy_config(scale, size, InitStrategy::Random, 0.0, dir);
    cfg.prior = PriorSection {
        amplitude: 1.0,
        exponent: 1.0,
        truth_amplitude: Some(1.0),
        truth_exponent: Some(2.0),
    };
    cfg.flow.kappa = kappa.unwrap_or(1.0);
    cfg.flow.adaptive = kappa.is_none();
    cfg
}

/// A planned run inside a figure.
#[derive(Debug, Clone)]
pub struct Job {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Runs needed for a figure. Output directories sit under `root/runs/`.
pub fn plan(figure: Figure, scale: Scale, root: &Path) -> Vec<Job> {
    let runs = root.join("runs");
    let mut jobs = Vec::new();
    let inits = [InitStrategy::Basis, InitStrategy::Random];
    match figure {
        Figure::Spread => {
            let size = match scale {
                Scale::Paper => 50,
                Scale::Desk => 20,
            };
            for init in inits {
                for rho in RHO_VALUES {
                    let label = format!("spread_{}_J{size}_rho{rho}", init_name(init));
                    let config = darcy_config(scale, size, init, rho, runs.join(&label));
                    jobs.push(Job { label, config });
                }
            }
        }
        Figure::Loss | Figure::LossGap => {
            for init in inits {
                for size in ENSEMBLE_SIZES {
                    for rho in RHO_VALUES {
                        let label = format!("{}_{}_J{size}_rho{rho}", figure.name(), init_name(init));
                        let config = darcy_config(scale, size, init, rho, runs.join(&label));
                        jobs.push(Job { label, config });
                    }
                }
            }
        }
        Figure::Estimate => {
            for init in inits {
                for size in ENSEMBLE_SIZES {
                    let label = format!("estimate_{}_J{size}", init_name(init));
                    let config = darcy_config(scale, size, init, 0.0, runs.join(&label));
                    jobs.push(Job { label, config });
                }
            }
        }
        Figure::Adaptive => {
            let label = "adaptive".to_string();
            jobs.push(Job {
                config: adaptive_config(scale, None, runs.join(&label)),
                label,
            });
            for kappa in ADAPTIVE_COMPARISON_KAPPAS {
                let label = format!("fixed_kappa{kappa}");
                jobs.push(Job {
                    config: adaptive_config(scale, Some(kappa), runs.join(&label)),
                    label,
                });
            }
        }
    }
    jobs
}

/// Curves of one run, as `(file name, CSV text)`.
fn curves(figure: Figure, label: &str, r: &RunResult) -> Vec<(String, String)> {
    let recs = records(r);
    let series = |cols: &[&str], f: &dyn Fn(&crate::diagnostics::DiagnosticsRecord) -> Vec<f64>| {
        csv(
            cols,
            recs.iter()
                .map(|rec| f(rec).into_iter().map(fmt_f64).collect::<Vec<_>>()),
        )
    };
    let spatial = || {
        let n = r.setup.truth.len();
        let h = 1.0 / (n + 1) as f64;
        let mean = r.trajectory.last().state.ensemble.mean();
        csv(
            &["s", "truth", "estimate"],
            (0..n).map(|i| {
                vec![
                    fmt_f64((i + 1) as f64 * h),
                    fmt_f64(r.setup.truth[i]),
                    fmt_f64(mean[i]),
                ]
            }),
        )
    };
    match figure {
        Figure::Spread => vec![(
            format!("{label}.csv"),
            series(&["t", "V_e", "spread_bound"], &|x| vec![x.time, x.v_e, x.spread_upper_bound]),
        )],
        Figure::Loss => vec![(
            format!("{label}.csv"),
            series(&["t", "loss_mean"], &|x| vec![x.time, x.loss_mean]),
        )],
        Figure::LossGap => {
            let phi = r.phi_star();
            vec![(
                format!("{label}.csv"),
                series(&["t", "loss_mean_gap"], &|x| vec![x.time, x.loss_mean - phi]),
            )]
        }
        Figure::Estimate => vec![(format!("{label}.csv"), spatial())],
        Figure::Adaptive => {
            let errors = csv(
                &["t", "error"],
                r.trajectory.checkpoints.iter().map(|c| {
                    let e = (c.state.ensemble.mean() - &r.setup.truth).norm_squared();
                    vec![fmt_f64(c.time), fmt_f64(e)]
                }),
            );
            vec![
                (format!("{label}_error.csv"), errors),
                (format!("{label}_estimate.csv"), spatial()),
            ]
        }
    }
}

#[derive(Debug)]
pub struct Reproduction {
    pub figure: Figure,
    pub scale: Scale,
    pub directory: PathBuf,
    /// Runs in plan order.
    pub runs: Vec<(String, RunResult)>,
    pub files: Vec<String>,
}

impl Reproduction {
    pub fn run(&self, label: &str) -> Option<&RunResult> {
        self.runs.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

/// Execute every run of `figure` in parallel, then write one CSV per curve
/// plus a plot script into `root`.
pub fn reproduce(figure: Figure, scale: Scale, root: &Path) -> Result<Reproduction, ExperimentError> {
    std::fs::create_dir_all(root).map_err(|e| ExperimentError::io(root, e))?;
    let jobs = plan(figure, scale, root);
    let runs = jobs
        .into_par_iter()
        .map(|job| {
            let result = execute(&job.config)?;
            write_artifacts(&result, &job.config.output.directory)?;
            Ok((job.label, result))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut files = Vec::new();
    for (label, r) in &runs {
        for (name, text) in curves(figure, label, r) {
            write(&root.join(&name), &text)?;
            files.push(name);
        }
    }
    write(&root.join("plot.py"), &figure_plot_script(figure.name(), &files))?;
    Ok(Reproduction {
        figure,
        scale,
        directory: root.to_path_buf(),
        runs,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_cover_every_curve() {
        let root = Path::new("r");
        assert_eq!(plan(Figure::Spread, Scale::Desk, root).len(), 8);
        assert_eq!(plan(Figure::LossGap, Scale::Desk, root).len(), 24);
        assert_eq!(plan(Figure::Estimate, Scale::Desk, root).len(), 6);
        let adaptive = plan(Figure::Adaptive, Scale::Desk, root);
        assert_eq!(adaptive.len(), 3);
        assert!(adaptive[0].config.flow.adaptive);
        assert_eq!(adaptive[0].config.ensemble.size, 20);
        for job in plan(Figure::Loss, Scale::Paper, root) {
            job.config.validate().unwrap();
            assert_eq!(job.config.integrator.t_final, 1e7);
            assert_eq!(job.config.dimension(), 255);
        }
    }

    #[test]
    fn figure_and_scale_names_parse() {
        for f in [Figure::Spread, Figure::Loss, Figure::LossGap, Figure::Estimate, Figure::Adaptive] {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        assert_eq!("desk".parse::<Scale>().unwrap(), Scale::Desk);
        assert!("huge".parse::<Scale>().is_err());
    }
}
