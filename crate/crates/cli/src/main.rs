use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use teki::experiment::check::check_path;
use teki::experiment::output::{rerun, write_artifacts, Manifest};
use teki::experiment::reproduce::{reproduce, Figure, Scale};
use teki::experiment::{run_path, ExperimentError, RunResult};

/// Tikhonov-regularized ensemble Kalman inversion experiments.
#[derive(Parser)]
#[command(name = "teki", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSVs, manifest and plot script.
    Run {
        /// Experiment configuration (TOML).
        config: PathBuf,
    },
    /// Re-run the configuration recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Output directory for the re-run (defaults to the recorded one).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Regenerate the curves of one figure.
    Reproduce {
        /// spread | loss | loss-gap | estimate | adaptive
        figure: Figure,
        /// desk | paper
        #[arg(long, default_value = "desk")]
        scale: Scale,
        #[arg(long, default_value = "out/reproduce")]
        output: PathBuf,
    },
    /// Run the invariant suite on an experiment and write verdict.toml.
    Check {
        config: PathBuf,
        /// Perturb the final state off the subspace before checking.
        #[arg(long)]
        corrupt: bool,
    },
}

fn summarize(r: &RunResult) {
    let last = r.trajectory.last();
    println!(
        "t = {:e}: V_e = {:e}, loss gap = {:e}, reference Phi_R = {:.6e} (KKT {:e}), {} steps in {:.2?}",
        last.time,
        last.diagnostics.as_ref().map_or(f64::NAN, |d| d.v_e),
        last.diagnostics.as_ref().map_or(f64::NAN, |d| d.loss_gap),
        r.phi_star(),
        r.reference.kkt_residual,
        r.trajectory.stats.accepted,
        r.elapsed,
    );
    println!(
        "bound checks {} ({} spread, {} zeta, {} drift failures)",
        if r.report.passed() { "passed" } else { "FAILED" },
        r.report.spread_failures(),
        r.report.zeta_failures(),
        r.report.drift_failures(),
    );
}

fn execute(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Run { config } => {
            let r = run_path(&config)?;
            summarize(&r);
            println!("wrote {}", r.config.output.directory.display());
            Ok(r.report.passed())
        }
        Command::Rerun { manifest, output } => {
            let mut m = Manifest::load(&manifest)?;
            if let Some(dir) = output {
                m.config.output.directory = dir;
            }
            let r = rerun(&m)?;
            write_artifacts(&r, &r.config.output.directory)?;
            summarize(&r);
            Ok(r.report.passed())
        }
        Command::Reproduce { figure, scale, output } => {
            let dir = output.join(format!("{}_{}", figure.name(), scale.name()));
            let rep = reproduce(figure, scale, &dir)?;
            for (label, r) in &rep.runs {
                println!(
                    "{label}: final V_e {:e}, Phi_R(mean) - Phi_R(u*) {:e}, |mean - truth|^2 {:e}, checks {}",
                    r.trajectory.last().diagnostics.as_ref().map_or(f64::NAN, |d| d.v_e),
                    r.trajectory.last().diagnostics.as_ref().map_or(f64::NAN, |d| d.loss_mean) - r.phi_star(),
                    r.reconstruction_error(),
                    if r.report.passed() { "passed" } else { "FAILED" },
                );
            }
            println!("wrote {} curves to {}", rep.files.len(), dir.display());
            Ok(rep.runs.iter().all(|(_, r)| r.report.passed()))
        }
        Command::Check { config, corrupt } => {
            let verdict = check_path(&config, corrupt)?;
            for c in &verdict.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(verdict.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
