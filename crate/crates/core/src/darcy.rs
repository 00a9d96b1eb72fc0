//! One-dimensional Darcy flow forward model.
//!
//! Solves `-(exp(u) p')' = 1` on `[0, 1]` with `p(0) = p(1) = 0` by the
//! conservative three-point finite-difference scheme and observes `p` at
//! equidistant grid nodes.
//!
//! Conductivities live at the interior nodes `s_l = l h`, `l = 1, …, 2^r - 1`.
//! Interface coefficients are arithmetic means of the neighbouring nodal
//! conductivities; the two boundary interfaces reuse the adjacent interior
//! value since the parameter has no boundary nodes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::problem::{DifferentiableForward, ForwardModel};

/// Uniform grid with mesh size `h = 2^{-r}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    refinement: u32,
}

impl GridSpec {
    pub fn new(refinement: u32) -> Result<Self> {
        if !(2..=20).contains(&refinement) {
            return Err(Error::InvalidParameter(format!(
                "grid refinement must be in 2..=20, got {refinement}"
            )));
        }
        Ok(Self { refinement })
    }

    pub fn refinement(&self) -> u32 {
        self.refinement
    }

    /// Number of cells `N = 2^r`.
    pub fn cells(&self) -> usize {
        1 << self.refinement
    }

    /// `n_x = 2^r - 1`.
    pub fn interior_points(&self) -> usize {
        self.cells() - 1
    }

    pub fn mesh_size(&self) -> f64 {
        1.0 / self.cells() as f64
    }

    /// Coordinates of the interior nodes.
    pub fn nodes(&self) -> DVector<f64> {
        let h = self.mesh_size();
        DVector::from_fn(self.interior_points(), |i, _| (i + 1) as f64 * h)
    }
}

/// Pointwise observation at a subset of interior grid nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationOperator {
    indices: Vec<usize>,
    grid_len: usize,
}

impl ObservationOperator {
    pub fn new(indices: Vec<usize>, grid_len: usize) -> Result<Self> {
        if let Some(&index) = indices.iter().find(|&&i| i >= grid_len) {
            return Err(Error::ObservationOutOfRange {
                index,
                len: grid_len,
            });
        }
        Ok(Self { indices, grid_len })
    }

    /// `count` points at `s_i = i / (count + 1)`, `i = 1, …, count`.
    /// Requires `count + 1` to divide the number of cells so every point is a
    /// grid node.
    pub fn equidistant(grid: &GridSpec, count: usize) -> Result<Self> {
        let cells = grid.cells();
        if count == 0 || !cells.is_multiple_of(count + 1) {
            return Err(Error::InvalidParameter(format!(
                "{count} equidistant observation points do not fall on a grid with {cells} cells"
            )));
        }
        let stride = cells / (count + 1);
        let indices = (1..=count).map(|i| i * stride - 1).collect();
        Self::new(indices, grid.interior_points())
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn observe(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        if p.len() != self.grid_len {
            return Err(Error::DimensionMismatch {
                context: "observed field",
                expected: self.grid_len,
                got: p.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().map(|&i| p[i]),
        ))
    }
}

/// Solve a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` couples row `i + 1` to column `i`, `upper[i]` couples row `i`
/// to column `i + 1`.
pub fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    debug_assert!(lower.len() + 1 == n && upper.len() + 1 == n && rhs.len() == n);
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    assert!(denom != 0.0, "singular tridiagonal system");
    if n > 1 {
        c[0] = upper[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * c[i - 1];
        assert!(denom != 0.0, "singular tridiagonal system");
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Interface coefficients `k_{j+1/2}`, `j = 0, …, N - 1`.
fn interface_coefficients(cond: &[f64]) -> Vec<f64> {
    let n = cond.len();
    let mut k = Vec::with_capacity(n + 1);
    k.push(cond[0]);
    for l in 0..n - 1 {
        k.push(0.5 * (cond[l] + cond[l + 1]));
    }
    k.push(cond[n - 1]);
    k
}

struct Assembled {
    cond: Vec<f64>,
    k: Vec<f64>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

fn assemble(grid: &GridSpec, u: &DVector<f64>) -> Result<Assembled> {
    let n = grid.interior_points();
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            context: "log-conductivity",
            expected: n,
            got: u.len(),
        });
    }
    if !all_finite(u.as_slice()) {
        return Err(Error::NonFinite("log-conductivity"));
    }
    let cond: Vec<f64> = u.iter().map(|v| v.exp()).collect();
    if !all_finite(&cond) {
        return Err(Error::NonFinite("conductivity"));
    }
    let k = interface_coefficients(&cond);
    let ih2 = 1.0 / (grid.mesh_size() * grid.mesh_size());
    let diag = (0..n).map(|i| (k[i] + k[i + 1]) * ih2).collect();
    let lower = (1..n).map(|i| -k[i] * ih2).collect();
    Ok(Assembled {
        cond,
        k,
        lower,
        diag,
    })
}

/// Pressure at the interior nodes for log-conductivity `u`.
pub fn solve_pde(grid: &GridSpec, u: &DVector<f64>) -> Result<DVector<f64>> {
    let a = assemble(grid, u)?;
    let rhs = vec![1.0; grid.interior_points()];
    Ok(DVector::from_vec(thomas_solve(
        &a.lower, &a.diag, &a.lower, &rhs,
    )))
}

/// `G = observe ∘ solve_pde`.
#[derive(Debug, Clone)]
pub struct DarcyForward {
    grid: GridSpec,
    obs: ObservationOperator,
}

impl DarcyForward {
    pub fn new(grid: GridSpec, obs: ObservationOperator) -> Result<Self> {
        if obs.grid_len != grid.interior_points() {
            return Err(Error::DimensionMismatch {
                context: "observation operator grid",
                expected: grid.interior_points(),
                got: obs.grid_len,
            });
        }
        Ok(Self { grid, obs })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn observation(&self) -> &ObservationOperator {
        &self.obs
    }
}

pub fn darcy_forward(
    grid: &GridSpec,
    op: &ObservationOperator,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    op.observe(&solve_pde(grid, u)?)
}

impl ForwardModel for DarcyForward {
    fn input_dim(&self) -> usize {
        self.grid.interior_points()
    }

    fn output_dim(&self) -> usize {
        self.obs.count()
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        darcy_forward(&self.grid, &self.obs, x)
    }
}

impl DifferentiableForward for DarcyForward {
    /// Adjoint sensitivities: one tridiagonal solve per observation.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let a = assemble(&self.grid, x)?;
        let n = self.grid.interior_points();
        let cells = self.grid.cells();
        let p = thomas_solve(&a.lower, &a.diag, &a.lower, &vec![1.0; n]);
        let ih2 = 1.0 / (self.grid.mesh_size() * self.grid.mesh_size());
        // nodal pressure with boundary zeros, index 0..=cells
        let node = |v: &[f64], j: usize| if j == 0 || j == cells { 0.0 } else { v[j - 1] };
        let dp: Vec<f64> = (0..cells).map(|j| node(&p, j + 1) - node(&p, j)).collect();

        let mut jac = DMatrix::zeros(self.obs.count(), n);
        let mut unit = vec![0.0; n];
        for (row, &obs_idx) in self.obs.indices.iter().enumerate() {
            unit[obs_idx] = 1.0;
            let w = thomas_solve(&a.lower, &a.diag, &a.lower, &unit);
            unit[obs_idx] = 0.0;
            // ∂(wᵀ A p)/∂k_j = d_j (w_{j+1} - w_j) / h²
            let dk: Vec<f64> = (0..cells)
                .map(|j| dp[j] * (node(&w, j + 1) - node(&w, j)) * ih2)
                .collect();
            // interface j couples nodal conductivities j and j + 1 (1-based)
            jac[(row, 0)] -= dk[0] * a.cond[0];
            jac[(row, n - 1)] -= dk[cells - 1] * a.cond[n - 1];
            for j in 1..cells - 1 {
                let half = 0.5 * dk[j];
                jac[(row, j - 1)] -= half * a.cond[j - 1];
                jac[(row, j)] -= half * a.cond[j];
            }
        }
        debug_assert_eq!(a.k.len(), cells);
        Ok(jac)
    }
}
