//! Runtime checks of the collapse, eigenvalue and gradient-approximation
//! bounds along computed trajectories, and power-law rate fitting.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{compute_stats, Ensemble};
use crate::error::{Error, Result};
use crate::integrator::Trajectory;
use crate::problem::{DifferentiableForward, ForwardModel, InverseProblem};
use crate::subspace::{restricted_min_eigenvalue, SubspaceBasis};

/// Safety factor applied to the empirical Lipschitz estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.5;
/// Random box pairs added to the particle pairs in the Lipschitz estimate.
pub const LIPSCHITZ_RANDOM_PAIRS: usize = 200;

/// Constants entering the collapse and eigenvalue bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    /// Extreme eigenvalues of `κ C₀⁻¹`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Largest eigenvalue of `Γ⁻¹`.
    pub lambda_max: f64,
    /// Empirical Lipschitz constant of `G`, safety factor included.
    pub c_lip: f64,
    pub v_e0: f64,
    pub zeta0: f64,
    /// `2 (c_lip² λ_max V_e(0) + σ_max)`.
    pub m: f64,
    pub rho: f64,
    pub ensemble_size: usize,
}

impl BoundConstants {
    pub fn new<F: ForwardModel>(
        problem: &InverseProblem<F>,
        c_lip: f64,
        v_e0: f64,
        zeta0: f64,
        rho: f64,
        ensemble_size: usize,
    ) -> Self {
        let (reg_lo, reg_hi) = problem.reg().inverse_spectrum_bounds();
        let (_, lambda_max) = problem.noise().inverse_spectrum_bounds();
        let sigma_min = problem.kappa() * reg_lo;
        let sigma_max = problem.kappa() * reg_hi;
        Self {
            sigma_min,
            sigma_max,
            lambda_max,
            c_lip,
            v_e0,
            zeta0,
            m: 2.0 * (c_lip * c_lip * lambda_max * v_e0 + sigma_max),
            rho,
            ensemble_size,
        }
    }

    pub fn spread_bound(&self, t: f64) -> f64 {
        spread_bound(t, self.v_e0, self.sigma_min, self.ensemble_size, self.rho)
    }

    pub fn zeta_bound(&self, t: f64) -> f64 {
        zeta_bound(t, self.zeta0, self.m, self.rho)
    }
}

/// `V_e(t) ≤ 1 / ((2 (1−ρ) σ_min / J) t + V_e(0)⁻¹)`.
pub fn spread_bound(t: f64, v_e0: f64, sigma_min: f64, ensemble_size: usize, rho: f64) -> f64 {
    1.0 / (2.0 * (1.0 - rho) * sigma_min / ensemble_size as f64 * t + 1.0 / v_e0)
}

/// `ζ(t) ≥ 1 / ((1−ρ) m t + ζ₀⁻¹)`.
pub fn zeta_bound(t: f64, zeta0: f64, m: f64, rho: f64) -> f64 {
    1.0 / ((1.0 - rho) * m * t + 1.0 / zeta0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradApproxError {
    /// `‖C^{uG} Γ⁻¹ (G(u^(j)) − y) − C ∇Φ(u^(j))‖` per particle.
    pub per_particle: Vec<f64>,
    /// `‖C^{uG} Γ⁻¹ (Ḡ − y) − C ∇Φ(ū)‖`.
    pub mean: f64,
}

impl GradApproxError {
    pub fn max(&self) -> f64 {
        self.per_particle.iter().copied().fold(0.0, f64::max)
    }
}

/// Exact gap between the derivative-free drift and the preconditioned
/// gradient, per particle and for the mean.
pub fn grad_approx_error<F: DifferentiableForward>(
    ensemble: &Ensemble,
    problem: &InverseProblem<F>,
) -> Result<GradApproxError> {
    let g = problem.forward().evaluate_columns(ensemble.members())?;
    let stats = compute_stats(ensemble, &g)?;
    let y = problem.data();
    let term = |gv: &DVector<f64>, x: &DVector<f64>| -> Result<f64> {
        let w = problem.noise().solve(&(gv - y));
        let kalman = &stats.cross_cov * &w;
        let grad = problem.forward().jacobian(x)?.transpose() * &w;
        Ok((kalman - &stats.cov * grad).norm())
    };
    let per_particle = (0..ensemble.size())
        .into_par_iter()
        .map(|j| term(&g.column(j).into_owned(), &ensemble.member(j)))
        .collect::<Result<Vec<_>>>()?;
    let mean_x = ensemble.mean();
    let mean_g = problem.forward().evaluate(&mean_x)?;
    // The mean version uses Ḡ in the Kalman term and G(ū) in the gradient.
    let w_bar = problem.noise().solve(&(&stats.g_mean - y));
    let w_mean = problem.noise().solve(&(mean_g - y));
    let grad = problem.forward().jacobian(&mean_x)?.transpose() * w_mean;
    let mean = (&stats.cross_cov * w_bar - &stats.cov * grad).norm();
    Ok(GradApproxError { per_particle, mean })
}

/// `max ‖G(a) − G(b)‖ / ‖a − b‖` over all particle pairs at every checkpoint
/// plus random pairs in the bounding box of the trajectory, times
/// [`LIPSCHITZ_SAFETY`].
pub fn estimate_lipschitz<F: ForwardModel, R: Rng + ?Sized>(
    forward: &F,
    snapshots: &[&DMatrix<f64>],
    random_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    let quotient = |ga: &DVector<f64>, gb: &DVector<f64>, d: f64| (ga - gb).norm() / d;
    for members in snapshots {
        let g = forward.evaluate_columns(members)?;
        for a in 0..members.ncols() {
            for b in a + 1..members.ncols() {
                let d = (members.column(a) - members.column(b)).norm();
                if d > 0.0 {
                    best = best.max(quotient(
                        &g.column(a).into_owned(),
                        &g.column(b).into_owned(),
                        d,
                    ));
                }
            }
        }
    }
    if let Some(first) = snapshots.first() {
        let n = first.nrows();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for members in snapshots {
            for c in members.column_iter() {
                for i in 0..n {
                    lo[i] = lo[i].min(c[i]);
                    hi[i] = hi[i].max(c[i]);
                }
            }
        }
        let draw = |rng: &mut R| {
            DVector::from_fn(n, |i, _| {
                if hi[i] > lo[i] {
                    rng.random_range(lo[i]..hi[i])
                } else {
                    lo[i]
                }
            })
        };
        for _ in 0..random_pairs {
            let a = draw(rng);
            let b = draw(rng);
            let d = (&a - &b).norm();
            if d > 0.0 {
                best = best.max(quotient(&forward.evaluate(&a)?, &forward.evaluate(&b)?, d));
            }
        }
    }
    Ok(best * LIPSCHITZ_SAFETY)
}

/// Per-checkpoint quantities written to the trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub v_e: f64,
    pub spread_upper_bound: f64,
    pub zeta: f64,
    pub zeta_lower_bound: f64,
    /// `Φ_R(ū_t)`.
    pub loss_mean: f64,
    /// `(1/J) Σ Φ_R(u_t^(j))`.
    pub loss_particle_avg: f64,
    /// `loss_particle_avg − Φ_R(u_*)`.
    pub loss_gap: f64,
    pub grad_approx_error: f64,
    /// `max_j ‖(I − P_S) u^(j)‖ / (1 + ‖u^(j)‖)`.
    pub subspace_drift: f64,
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
}

impl DiagnosticsRecord {
    /// `Φ_R(ū_t) − Φ_R(u_*)`.
    pub fn mean_loss_gap(&self, phi_star: f64) -> f64 {
        self.loss_mean - phi_star
    }
}

/// Fill the diagnostics of every checkpoint.
pub fn annotate<F: DifferentiableForward>(
    trajectory: &mut Trajectory,
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    constants: &BoundConstants,
    phi_star: f64,
) -> Result<()> {
    let records = trajectory
        .checkpoints
        .par_iter()
        .map(|cp| {
            let e = &cp.state.ensemble;
            let g = problem.forward().evaluate_columns(e.members())?;
            let stats = compute_stats(e, &g)?;
            let losses: Vec<f64> = (0..e.size())
                .map(|j| problem.misfit_from_output(&g.column(j).into_owned()) + problem.regularization(&e.member(j)))
                .collect();
            let loss_particle_avg = losses.iter().sum::<f64>() / e.size() as f64;
            let drift = (0..e.size())
                .map(|j| {
                    let u = e.member(j);
                    basis.member_residual(&u) / (1.0 + u.norm())
                })
                .fold(0.0, f64::max);
            let thetas = cp.state.theta.iter().flat_map(|t| t.theta.iter().copied());
            let (theta_min, theta_max) = if cp.state.theta.is_empty() {
                (None, None)
            } else {
                let (lo, hi) = thetas.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
                (Some(lo), Some(hi))
            };
            Ok(DiagnosticsRecord {
                time: cp.time,
                v_e: stats.spread,
                spread_upper_bound: constants.spread_bound(cp.time),
                zeta: restricted_min_eigenvalue(&stats.cov, basis),
                zeta_lower_bound: constants.zeta_bound(cp.time),
                loss_mean: problem.regularized_loss(&stats.mean)?,
                loss_particle_avg,
                loss_gap: loss_particle_avg - phi_star,
                grad_approx_error: grad_approx_error(e, problem)?.max(),
                subspace_drift: drift,
                theta_min,
                theta_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for (cp, r) in trajectory.checkpoints.iter_mut().zip(records) {
        cp.diagnostics = Some(r);
    }
    Ok(())
}

/// Relative slack for bound verdicts and the absolute drift threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckTolerances {
    pub bound_rel: f64,
    pub drift: f64,
}

impl CheckTolerances {
    /// `1e-6 + 10 · rel_tol` on the bounds; `1e-6` on subspace drift.
    pub fn for_integrator(rel_tol: f64) -> Self {
        Self {
            bound_rel: 1e-6 + 10.0 * rel_tol,
            drift: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointVerdict {
    pub time: f64,
    /// `None` where the bound does not apply (adaptive regularization).
    pub spread_ok: Option<bool>,
    pub zeta_ok: Option<bool>,
    pub zeta_positive: bool,
    pub drift_ok: bool,
}

impl CheckpointVerdict {
    pub fn passed(&self) -> bool {
        self.spread_ok != Some(false)
            && self.zeta_ok != Some(false)
            && self.zeta_positive
            && self.drift_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rows: Vec<CheckpointVerdict>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckpointVerdict::passed)
    }

    pub fn spread_failures(&self) -> usize {
        self.rows.iter().filter(|r| r.spread_ok == Some(false)).count()
    }

    pub fn zeta_failures(&self) -> usize {
        self.rows.iter().filter(|r| r.zeta_ok == Some(false)).count()
    }

    pub fn drift_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.drift_ok).count()
    }
}

/// Compare every checkpoint against the collapse and eigenvalue bounds.
/// Failures are reported, not raised. `bounds_apply = false` skips the two
/// bound comparisons (used for adaptive regularization, where `C₀` moves).
pub fn check_records(
    records: &[DiagnosticsRecord],
    tol: CheckTolerances,
    bounds_apply: bool,
) -> BoundReport {
    let rows = records
        .iter()
        .map(|r| CheckpointVerdict {
            time: r.time,
            spread_ok: bounds_apply.then_some(r.v_e <= r.spread_upper_bound * (1.0 + tol.bound_rel)),
            zeta_ok: bounds_apply.then_some(r.zeta >= r.zeta_lower_bound * (1.0 - tol.bound_rel)),
            zeta_positive: r.zeta > 0.0,
            drift_ok: r.subspace_drift <= tol.drift,
        })
        .collect();
    BoundReport { rows }
}

/// [`check_records`] over an annotated trajectory.
pub fn check_trajectory(
    trajectory: &Trajectory,
    tol: CheckTolerances,
    bounds_apply: bool,
) -> Result<BoundReport> {
    let records = trajectory
        .checkpoints
        .iter()
        .map(|c| {
            c.diagnostics
                .clone()
                .ok_or_else(|| Error::InvalidParameter("trajectory is not annotated".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(check_records(&records, tol, bounds_apply))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// `−slope` of `log(value)` against `log(t)`.
    pub exponent: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub points: usize,
}

/// Least-squares power-law fit over `t ∈ [window.0, window.1]`.
pub fn fit_rate(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, _)| t >= window.0 && t <= window.1 && t > 0.0)
        .map(|(&t, &v)| (t, v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::RateFit(format!(
            "need at least 2 points in window, got {}",
            pts.len()
        )));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::RateFit(format!("nonpositive value {v:e} at t = {t:e}")));
    }
    let xs: Vec<f64> = pts.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(RateFit {
        exponent: -slope,
        residual,
        points: pts.len(),
    })
}

/// Whether `values` is non-increasing (up to `rel_slack`) for `t ≥ from`.
pub fn eventually_monotone(times: &[f64], values: &[f64], from: f64, rel_slack: f64) -> bool {
    let tail: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(&t, _)| t >= from)
        .map(|(_, &v)| v)
        .collect();
    tail.windows(2)
        .all(|w| w[1] <= w[0] + rel_slack * w[0].abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::LinearForward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spread_bound_shape() {
        assert_eq!(spread_bound(0.0, 2.5, 0.3, 5, 0.0), 2.5);
        let t = 1e9;
        let b = spread_bound(t, 2.5, 0.3, 5, 0.0);
        assert!((b * 2.0 * 0.3 * t / 5.0 - 1.0).abs() < 1e-6);
        let b5 = spread_bound(t, 2.5, 0.3, 5, 0.5);
        assert!((b5 / b - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zeta_bound_shape() {
        assert_eq!(zeta_bound(0.0, 0.7, 3.0, 0.0), 0.7);
        let ts = [0.0, 1.0, 10.0, 1e3, 1e6];
        let vals: Vec<f64> = ts.iter().map(|&t| zeta_bound(t, 0.7, 3.0, 0.0)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        let frozen = zeta_bound(1e6, 0.7, 3.0, 1.0 - 1e-15);
        assert!((frozen - 0.7).abs() < 1e-6);
    }

    #[test]
    fn constants_follow_formula() {
        let p = InverseProblem::new(
            LinearForward::new(DMatrix::identity(2, 2)),
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.25])),
            2.0,
        )
        .unwrap();
        let c = BoundConstants::new(&p, 3.0, 0.4, 0.1, 0.25, 5);
        assert!((c.sigma_min - 0.5).abs() < 1e-12);
        assert!((c.sigma_max - 8.0).abs() < 1e-12);
        assert!((c.lambda_max - 2.0).abs() < 1e-12);
        assert_eq!(c.m, 2.0 * (9.0 * c.lambda_max * 0.4 + c.sigma_max));
    }

    #[test]
    fn linear_gradient_approximation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let p = InverseProblem::new(
            LinearForward::new(a),
            DVector::from_vec(vec![1.0, 0.0, -1.0]),
            DMatrix::identity(3, 3),
            DMatrix::identity(5, 5),
            1.0,
        )
        .unwrap();
        let e = Ensemble::new(DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let err = grad_approx_error(&e, &p).unwrap();
        assert!(err.max() <= 1e-12);
        assert!(err.mean <= 1e-12);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let flat = Ensemble::from_members(&[v.clone(), v]).unwrap();
        assert_eq!(grad_approx_error(&flat, &p).unwrap().max(), 0.0);
    }

    #[test]
    fn rate_fit_on_synthetic_data() {
        let ts: Vec<f64> = (0..50).map(|i| 10f64.powf(2.0 + 2.0 * i as f64 / 49.0)).collect();
        let gap: Vec<f64> = ts.iter().map(|t| (100.0 / (t + 1.0)).sqrt()).collect();
        let fit = fit_rate(&ts, &gap, (1e2, 1e4)).unwrap();
        assert!((fit.exponent - 0.5).abs() < 0.02);

        let flat = vec![3.0; ts.len()];
        assert!(fit_rate(&ts, &flat, (1e2, 1e4)).unwrap().exponent.abs() < 1e-12);

        let pure: Vec<f64> = ts.iter().map(|t| 7.0 / t).collect();
        assert!((fit_rate(&ts, &pure, (1e2, 1e4)).unwrap().exponent - 1.0).abs() < 1e-12);

        let mut bad = pure.clone();
        bad[10] = -1.0;
        assert!(matches!(fit_rate(&ts, &bad, (1e2, 1e4)), Err(Error::RateFit(_))));
    }

    #[test]
    fn inflated_spread_fails_bound_check() {
        let rec = |t: f64, v: f64| DiagnosticsRecord {
            time: t,
            v_e: v,
            spread_upper_bound: 1.0 / (1.0 + t),
            zeta: 0.5,
            zeta_lower_bound: 0.1,
            loss_mean: 0.0,
            loss_particle_avg: 0.0,
            loss_gap: 0.0,
            grad_approx_error: 0.0,
            subspace_drift: 0.0,
            theta_min: None,
            theta_max: None,
        };
        let good: Vec<_> = (0..5).map(|i| rec(i as f64, 0.9 / (1.0 + i as f64))).collect();
        let tol = CheckTolerances::for_integrator(1e-6);
        assert!(check_records(&good, tol, true).passed());
        let bad: Vec<_> = good
            .iter()
            .map(|r| DiagnosticsRecord {
                v_e: 2.0 * r.v_e,
                ..r.clone()
            })
            .collect();
        let report = check_records(&bad, tol, true);
        assert!(!report.passed());
        assert_eq!(report.spread_failures(), 5);
        assert!(check_records(&bad, tol, false).passed());
    }

    #[test]
    fn lipschitz_of_linear_map_is_bounded_by_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let f = LinearForward::new(a.clone());
        let snap = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let est = estimate_lipschitz(&f, &[&snap], 50, &mut rng).unwrap();
        let norm = a.singular_values().max();
        assert!(est <= LIPSCHITZ_SAFETY * norm * (1.0 + 1e-12));
        assert!(est > 0.0);
    }

    #[test]
    fn monotone_tail_detection() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert!(eventually_monotone(&t, &[1.0, 5.0, 4.0, 3.0], 2.0, 0.0));
        assert!(!eventually_monotone(&t, &[1.0, 5.0, 4.0, 4.5], 2.0, 0.0));
    }
}
