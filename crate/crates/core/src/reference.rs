//! Minimizer of `Φ_R` over the affine subspace spanned by the initial
//! ensemble, by projected gradient descent with Armijo backtracking.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::problem::{DifferentiableForward, InverseProblem};
use crate::subspace::SubspaceBasis;

pub const ARMIJO_DECREASE: f64 = 1e-4;
pub const BACKTRACK_FACTOR: f64 = 0.5;
pub const INITIAL_STEP: f64 = 1.0;
/// Relative size below which changes in the objective are rounding noise.
const NOISE_FLOOR: f64 = 1e-13;
/// Points farther than this (relative to `1 + ‖x‖`) from 𝓑 are rejected.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ConstrainedSolution {
    pub minimizer: DVector<f64>,
    pub value: f64,
    /// `‖P ∇Φ_R(u_*)‖` with `P` the projection onto the spread span.
    pub kkt_residual: f64,
    /// `|⟨∇Φ_R(u_*), u₀^⊥/‖u₀^⊥‖⟩|`: the gradient component along the offset
    /// direction, which the affine constraint does not let the iterate follow.
    pub offset_derivative: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iterations: usize,
}

impl SolverOptions {
    /// `tol = 1e-10 · (1 + |Φ_R(start)|)`.
    pub fn default_for(start_value: f64) -> Self {
        Self {
            tol: 1e-10 * (1.0 + start_value.abs()),
            max_iterations: 200_000,
        }
    }
}

fn projected_gradient<F: DifferentiableForward>(
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let full = problem.grad_regularized_loss(x)?;
    let proj = basis.project_spread(&full);
    Ok((full, proj))
}

fn check_membership(basis: &SubspaceBasis, x: &DVector<f64>) -> Result<()> {
    let distance = basis.affine_distance(x);
    if distance > MEMBERSHIP_TOL * (1.0 + x.norm()) {
        return Err(Error::OffSubspace { distance });
    }
    Ok(())
}

/// `‖P ∇Φ_R(x)‖` for `x ∈ 𝓑`.
pub fn kkt_residual<F: DifferentiableForward>(
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    x: &DVector<f64>,
) -> Result<f64> {
    check_membership(basis, x)?;
    Ok(projected_gradient(problem, basis, x)?.1.norm())
}

fn offset_derivative(basis: &SubspaceBasis, full_grad: &DVector<f64>) -> f64 {
    let n = basis.offset.norm();
    if n == 0.0 {
        0.0
    } else {
        full_grad.dot(&basis.offset).abs() / n
    }
}

/// Projected gradient descent on 𝓑. Trial steps after the first use the
/// Barzilai–Borwein length. Steps satisfy the Armijo condition until the
/// predicted decrease is below rounding noise, after which a step is accepted
/// when it shrinks the projected gradient.
pub fn solve_constrained<F: DifferentiableForward>(
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    start: &DVector<f64>,
    options: SolverOptions,
) -> Result<ConstrainedSolution> {
    check_membership(basis, start)?;
    let mut x = start.clone();
    let mut f = problem.regularized_loss(&x)?;
    let (mut full, mut g) = projected_gradient(problem, basis, &x)?;
    let mut trial = INITIAL_STEP;
    let mut iterations = 0;

    loop {
        let gnorm = g.norm();
        if gnorm <= options.tol {
            return Ok(ConstrainedSolution {
                value: f,
                kkt_residual: gnorm,
                offset_derivative: offset_derivative(basis, &full),
                minimizer: x,
                iterations,
            });
        }
        if iterations >= options.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                residual: gnorm,
                best: x,
            });
        }
        iterations += 1;

        let g2 = gnorm * gnorm;
        let mut step = trial;
        let (x_new, f_new, full_new, g_new) = loop {
            let cand = &x - &g * step;
            let fc = problem.regularized_loss(&cand).ok().filter(|v| v.is_finite());
            if let Some(fc) = fc {
                if fc <= f - ARMIJO_DECREASE * step * g2 && fc < f {
                    let (fg, pg) = projected_gradient(problem, basis, &cand)?;
                    break (cand, fc, fg, pg);
                }
                // Near the minimizer the predicted decrease drops below the
                // rounding noise of Φ_R; fall back to gradient-norm decrease.
                if step * g2 <= NOISE_FLOOR * (1.0 + f.abs()) {
                    let (fg, pg) = projected_gradient(problem, basis, &cand)?;
                    if pg.norm() < gnorm {
                        break (cand, fc.min(f), fg, pg);
                    }
                }
            }
            step *= BACKTRACK_FACTOR;
            if step * gnorm <= f64::EPSILON * (1.0 + x.norm()) {
                // no representable decrease left along -g
                return Err(Error::NotConverged {
                    iterations,
                    residual: gnorm,
                    best: x,
                });
            }
        };

        let dx = &x_new - &x;
        let dg = &g_new - &g;
        let curvature = dx.dot(&dg);
        trial = if curvature > 0.0 {
            dx.norm_squared() / curvature
        } else {
            step / BACKTRACK_FACTOR
        };
        x = x_new;
        f = f_new;
        g = g_new;
        full = full_new;
    }
}

/// Smallest value of `⟨∇Φ_R(x + d) − ∇Φ_R(x), d⟩ / ‖d‖²` over random
/// directions `d` of length `radius` in the spread span: an empirical local
/// strong-convexity estimate around `x`.
pub fn empirical_convexity<F: DifferentiableForward, R: Rng + ?Sized>(
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    x: &DVector<f64>,
    radius: f64,
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let g0 = problem.grad_regularized_loss(x)?;
    let q = &basis.spread_basis;
    let mut min_quot = f64::INFINITY;
    for _ in 0..probes {
        let c = DVector::from_fn(q.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let d = (q * c).normalize() * radius;
        let g1 = problem.grad_regularized_loss(&(x + &d))?;
        min_quot = min_quot.min((g1 - &g0).dot(&d) / (radius * radius));
    }
    Ok(min_quot)
}

/// Smallest change `Φ_R(x + d) − Φ_R(x)` over `count` random directions `d`
/// of length `radius` in the spread span. Nonnegative up to rounding when
/// `x` minimizes `Φ_R` over 𝓑.
pub fn perturbation_certificate<F: DifferentiableForward, R: Rng + ?Sized>(
    problem: &InverseProblem<F>,
    basis: &SubspaceBasis,
    x: &DVector<f64>,
    radius: f64,
    count: usize,
    rng: &mut R,
) -> Result<f64> {
    let f0 = problem.regularized_loss(x)?;
    let q = &basis.spread_basis;
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        let c = DVector::from_fn(q.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let d = (q * c).normalize() * radius;
        worst = worst.min(problem.regularized_loss(&(x + d))? - f0);
    }
    Ok(worst)
}
