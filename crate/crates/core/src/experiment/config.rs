//! Declarative experiment configuration and its validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::integrator::IntegratorConfig;
use crate::prior::InitStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    /// Random Gaussian matrix `G(u) = A u`.
    Linear,
    /// Observed pressure of the one-dimensional Darcy problem.
    Darcy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    /// Darcy grid refinement `r`, giving `n_x = 2^r − 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<u32>,
    /// Parameter dimension of the linear problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    pub observations: usize,
    /// `Γ = noise_variance · I`.
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    /// `β` in `C₀ = β (−Δ)^{−α}`.
    pub amplitude: f64,
    /// `α`.
    pub exponent: f64,
    /// Ground-truth prior; defaults to the regularization prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_exponent: Option<f64>,
}

impl PriorSection {
    pub fn truth(&self) -> (f64, f64) {
        (
            self.truth_amplitude.unwrap_or(self.amplitude),
            self.truth_exponent.unwrap_or(self.exponent),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub size: usize,
    pub init: InitStrategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default)]
    pub rho: f64,
    pub kappa: f64,
    #[serde(default)]
    pub adaptive: bool,
    /// Upper bound `M` of the hyperparameter box.
    #[serde(default = "default_theta_bound")]
    pub theta_bound: f64,
    #[serde(default = "default_theta_floor")]
    pub theta_floor: f64,
    #[serde(default = "default_theta_rate")]
    pub theta_rate: f64,
    #[serde(default)]
    pub per_particle_theta: bool,
}

fn default_theta_bound() -> f64 {
    1e6
}

fn default_theta_floor() -> f64 {
    1e-6
}

fn default_theta_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Emit `plot.py` next to the CSVs.
    #[serde(default = "default_true")]
    pub plot_script: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub prior: PriorSection,
    pub ensemble: EnsembleSection,
    pub flow: FlowSection,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub output: OutputSection,
}

/// A rejected configuration, with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn positive_finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::new("", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Parameter dimension `n_x`.
    pub fn dimension(&self) -> usize {
        match self.problem.kind {
            ProblemKind::Linear => self.problem.dimension.unwrap_or(0),
            ProblemKind::Darcy => (1usize << self.problem.refinement.unwrap_or(0)) - 1,
        }
    }

    /// Checks every module precondition that can be decided without
    /// computing anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        match p.kind {
            ProblemKind::Darcy => {
                let r = p.refinement.ok_or_else(|| {
                    ConfigError::new("problem.refinement", "required for darcy problems")
                })?;
                if !(2..=20).contains(&r) {
                    return Err(ConfigError::new(
                        "problem.refinement",
                        format!("must be in 2..=20, got {r}"),
                    ));
                }
                if p.dimension.is_some() {
                    return Err(ConfigError::new(
                        "problem.dimension",
                        "only used by linear problems; darcy uses refinement",
                    ));
                }
                let cells = 1usize << r;
                if p.observations == 0 || p.observations >= cells || !cells.is_multiple_of(p.observations + 1) {
                    return Err(ConfigError::new(
                        "problem.observations",
                        format!("observations + 1 must divide 2^r = {cells}, got {}", p.observations),
                    ));
                }
            }
            ProblemKind::Linear => {
                let n = p.dimension.ok_or_else(|| {
                    ConfigError::new("problem.dimension", "required for linear problems")
                })?;
                if n < 2 {
                    return Err(ConfigError::new("problem.dimension", format!("must be >= 2, got {n}")));
                }
                if p.refinement.is_some() {
                    return Err(ConfigError::new(
                        "problem.refinement",
                        "only used by darcy problems; linear uses dimension",
                    ));
                }
                if p.observations == 0 {
                    return Err(ConfigError::new("problem.observations", "must be positive"));
                }
            }
        }
        positive_finite("problem.noise_variance", p.noise_variance)?;

        positive_finite("prior.amplitude", self.prior.amplitude)?;
        positive_finite("prior.exponent", self.prior.exponent)?;
        let (ta, te) = self.prior.truth();
        positive_finite("prior.truth_amplitude", ta)?;
        positive_finite("prior.truth_exponent", te)?;

        let n = self.dimension();
        let j = self.ensemble.size;
        if j < 2 {
            return Err(ConfigError::new("ensemble.size", format!("must be >= 2, got {j}")));
        }
        if j > n {
            return Err(ConfigError::new(
                "ensemble.size",
                format!("must not exceed the parameter dimension {n} (linear independence), got {j}"),
            ));
        }

        let f = &self.flow;
        if !(f.rho >= 0.0) {
            return Err(ConfigError::new("flow.rho", format!("must be >= 0, got {}", f.rho)));
        }
        if f.rho >= 1.0 {
            return Err(ConfigError::new("flow.rho", format!("rho must be < 1, got {}", f.rho)));
        }
        if !(f.kappa >= 0.0 && f.kappa.is_finite()) {
            return Err(ConfigError::new("flow.kappa", format!("must be >= 0 and finite, got {}", f.kappa)));
        }
        if f.kappa == 0.0 && f.rho > 0.0 && !f.adaptive {
            return Err(ConfigError::new("flow.rho", "covariance inflation requires kappa > 0"));
        }
        if f.adaptive {
            positive_finite("flow.theta_floor", f.theta_floor)?;
            positive_finite("flow.theta_rate", f.theta_rate)?;
            if !(f.theta_bound > f.theta_floor && f.theta_bound.is_finite()) {
                return Err(ConfigError::new(
                    "flow.theta_bound",
                    format!("must be finite and exceed theta_floor, got {}", f.theta_bound),
                ));
            }
        }

        let i = &self.integrator;
        positive_finite("integrator.rel_tol", i.rel_tol)?;
        positive_finite("integrator.abs_tol", i.abs_tol)?;
        positive_finite("integrator.t_final", i.t_final)?;
        if i.checkpoints < 2 {
            return Err(ConfigError::new("integrator.checkpoints", "must be >= 2"));
        }
        if i.max_steps == 0 {
            return Err(ConfigError::new("integrator.max_steps", "must be positive"));
        }
        if self.output.directory.as_os_str().is_empty() {
            return Err(ConfigError::new("output.directory", "must not be empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const LINEAR: &str = r#"
[problem]
kind = "linear"
dimension = 10
observations = 20
noise_variance = 0.01

[prior]
amplitude = 10.0
exponent = 1.0

[ensemble]
size = 5
init = "random"
seed = 7

[flow]
rho = 0.0
kappa = 1e-4

[integrator]
t_final = 1000.0

[output]
directory = "out"
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml(LINEAR).unwrap();
        assert_eq!(c.dimension(), 10);
        assert_eq!(c.integrator.checkpoints, IntegratorConfig::default().checkpoints);
        assert_eq!(c.prior.truth(), (10.0, 1.0));
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_rho_one_with_field_path() {
        let text = LINEAR.replace("rho = 0.0", "rho = 1.0");
        let e = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(e.field, "flow.rho");
        assert!(e.to_string().contains("rho must be < 1"));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = LINEAR.replace("kappa = 1e-4", "kappa = 1e-4\nkapa = 2.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_inconsistent_problem_fields() {
        let darcy = LINEAR
            .replace("kind = \"linear\"", "kind = \"darcy\"")
            .replace("dimension = 10", "refinement = 6")
            .replace("observations = 20", "observations = 30");
        assert_eq!(ExperimentConfig::from_toml(&darcy).unwrap_err().field, "problem.observations");
        let ok = darcy.replace("observations = 30", "observations = 31");
        assert_eq!(ExperimentConfig::from_toml(&ok).unwrap().dimension(), 63);
        let big = LINEAR.replace("size = 5", "size = 11");
        assert_eq!(ExperimentConfig::from_toml(&big).unwrap_err().field, "ensemble.size");
        let neg = LINEAR.replace("noise_variance = 0.01", "noise_variance = -1.0");
        assert_eq!(ExperimentConfig::from_toml(&neg).unwrap_err().field, "problem.noise_variance");
    }
}
