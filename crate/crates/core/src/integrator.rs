//! Adaptive Dormand–Prince 5(4) integration with dense output at
//! logarithmically spaced checkpoints.

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};
use crate::flows::{FlowState, TekiSystem};
use crate::problem::ForwardModel;

/// A first-order system `y' = f(t, y)` on a flat state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Optional post-step correction of the state (e.g. projection onto an
    /// invariant subspace). Default: no-op.
    fn project(&self, _y: &mut [f64]) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_final: f64,
    pub checkpoints: usize,
    pub max_steps: usize,
    /// Project the state after every accepted step.
    pub project: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            t_final: 1e4,
            checkpoints: 71,
            max_steps: 2_000_000,
            project: false,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter("t_final must be positive".into()));
        }
        if self.checkpoints < 2 {
            return Err(Error::InvalidParameter("need at least 2 checkpoints".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `{0}` followed by `count - 1` geometrically spaced times ending exactly at
/// `t_final`. The geometric sequence starts at `min(1e-3, 1e-3 · t_final)`.
pub fn checkpoint_times(t_final: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2, "need at least two checkpoints");
    let mut times = Vec::with_capacity(count);
    times.push(0.0);
    let n = count - 1;
    if n == 1 {
        times.push(t_final);
        return times;
    }
    let t0 = (1e-3f64).min(1e-3 * t_final);
    let ratio = (t_final / t0).ln();
    for i in 0..n {
        let t = if i == n - 1 {
            t_final
        } else {
            t0 * (ratio * i as f64 / (n - 1) as f64).exp()
        };
        times.push(t);
    }
    times
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// States at the requested output times.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// PI step-size controller.
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    cont: [Vec<f64>; 5],
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            cont: std::array::from_fn(|_| vec![0.0; n]),
        }
    }
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], cfg: &IntegratorConfig) -> f64 {
    let n = y.len().max(1) as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    f0: &[f64],
    cfg: &IntegratorConfig,
    ws: &mut Workspace,
) -> Result<f64> {
    let n = y0.len();
    let sc: Vec<f64> = y0.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let rms = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(cfg.t_final);
    for i in 0..n {
        ws.tmp[i] = y0[i] + h0 * f0[i];
    }
    sys.eval(h0, &ws.tmp, &mut ws.k[1])?;
    let diff: Vec<f64> = ws.k[1].iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(cfg.t_final))
}

/// Integrate from `t = 0` and report the state at every time in `outputs`
/// (ascending, first entry may be 0, last entry is the horizon).
pub fn solve_dense<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    outputs: &[f64],
    cfg: &IntegratorConfig,
) -> Result<DenseSolution> {
    cfg.validate()?;
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: n,
            got: y0.len(),
        });
    }
    let t_end = *outputs.last().unwrap_or(&cfg.t_final);
    let mut ws = Workspace::new(n);
    let mut stats = SolverStats::default();
    let mut y = y0.to_vec();
    sys.project(&mut y);
    let mut t = 0.0;
    sys.eval(t, &y, &mut ws.k[0])?;
    stats.evaluations += 1;
    if !ws.k[0].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("initial right-hand side"));
    }

    let mut times = Vec::with_capacity(outputs.len());
    let mut states = Vec::with_capacity(outputs.len());
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= t {
        times.push(outputs[next_out]);
        states.push(y.clone());
        next_out += 1;
    }

    let mut h = initial_step(sys, &y, &ws.k[0].clone(), cfg, &mut ws)?;
    stats.evaluations += 1;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    while t < t_end {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded(cfg.max_steps));
        }
        if h < 1e-14 * t.abs().max(1e-300) {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }

        let Workspace {
            k, tmp, y_new, cont, ..
        } = &mut ws;
        let stage = |tmp: &mut Vec<f64>, coeffs: &[(usize, f64)], k: &[Vec<f64>; 7]| {
            for i in 0..n {
                let mut acc = 0.0;
                for &(s, a) in coeffs {
                    acc += a * k[s][i];
                }
                tmp[i] = y[i] + h * acc;
            }
        };
        stage(tmp, &[(0, A21)], k);
        sys.eval(t + C2 * h, tmp, &mut k[1])?;
        stage(tmp, &[(0, A31), (1, A32)], k);
        sys.eval(t + C3 * h, tmp, &mut k[2])?;
        stage(tmp, &[(0, A41), (1, A42), (2, A43)], k);
        sys.eval(t + C4 * h, tmp, &mut k[3])?;
        stage(tmp, &[(0, A51), (1, A52), (2, A53), (3, A54)], k);
        sys.eval(t + C5 * h, tmp, &mut k[4])?;
        stage(tmp, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)], k);
        sys.eval(t + h, tmp, &mut k[5])?;
        stage(tmp, &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)], k);
        y_new.copy_from_slice(tmp);
        sys.eval(t + h, y_new, &mut k[6])?;
        stats.evaluations += 6;

        for i in 0..n {
            tmp[i] = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
        }
        let err = error_norm(&y, y_new, tmp, cfg);
        if !err.is_finite() {
            // treat as a failed step and shrink hard
            stats.rejected += 1;
            h *= MIN_FACTOR;
            last_rejected = true;
            continue;
        }

        let fac11 = err.powf(0.2 - BETA * 0.75);
        if err <= 1.0 {
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFETY).clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);

            for i in 0..n {
                let dy = y_new[i] - y[i];
                let bspl = h * k[0][i] - dy;
                cont[0][i] = y[i];
                cont[1][i] = dy;
                cont[2][i] = bspl;
                cont[3][i] = dy - h * k[6][i] - bspl;
                cont[4][i] = h
                    * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                        + D7 * k[6][i]);
            }
            let t_old = t;
            t = if last { t_end } else { t + h };
            while next_out < outputs.len() && outputs[next_out] <= t {
                let s = (outputs[next_out] - t_old) / h;
                let s1 = 1.0 - s;
                let out: Vec<f64> = if outputs[next_out] == t {
                    y_new.clone()
                } else {
                    (0..n)
                        .map(|i| {
                            cont[0][i]
                                + s * (cont[1][i]
                                    + s1 * (cont[2][i] + s * (cont[3][i] + s1 * cont[4][i])))
                        })
                        .collect()
                };
                times.push(outputs[next_out]);
                states.push(out);
                next_out += 1;
            }
            y.copy_from_slice(y_new);
            if sys_projects(sys, &mut y) {
                sys.eval(t, &y, &mut k[0])?;
                stats.evaluations += 1;
            } else {
                let k6 = k[6].clone();
                k[0].copy_from_slice(&k6);
            }
            stats.accepted += 1;
            last_rejected = false;
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / MIN_FACTOR);
            stats.rejected += 1;
            last_rejected = true;
        }
    }

    Ok(DenseSolution {
        times,
        states,
        stats,
    })
}

/// Apply the system projection; returns whether the state changed.
fn sys_projects<S: OdeSystem + ?Sized>(sys: &S, y: &mut [f64]) -> bool {
    let before = y.to_vec();
    sys.project(y);
    before.as_slice() != &*y
}

/// One saved state of a flow integration.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub time: f64,
    pub state: FlowState,
    pub diagnostics: Option<DiagnosticsRecord>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    /// Whether states were re-projected after every step.
    pub projected: bool,
    pub stats: SolverStats,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.time).collect()
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("trajectory is nonempty")
    }
}

/// Integrate a flow from `initial` and keep snapshots at
/// [`checkpoint_times`]. Diagnostics are left empty.
pub fn integrate<F: ForwardModel>(
    system: &TekiSystem<F>,
    initial: &FlowState,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let times = checkpoint_times(config.t_final, config.checkpoints);
    let y0 = system.pack(initial);
    let sol = solve_dense(system, &y0, &times, config)?;
    let checkpoints = sol
        .times
        .iter()
        .zip(&sol.states)
        .map(|(&t, y)| {
            Ok(Checkpoint {
                time: t,
                state: system.unpack(y, t)?,
                diagnostics: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Trajectory {
        checkpoints,
        projected: system.projects(),
        stats: sol.stats,
    })
}
