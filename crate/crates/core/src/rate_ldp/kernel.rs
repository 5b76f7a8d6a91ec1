//! Transition kernels and the static (Schrödinger bridge) rate.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gaussian_interval_mass, AnalyticPotential, Grid, GridDensity};
use crate::semigroup::FPOperator;
use crate::static_ot::{sinkhorn, Coupling, SINKHORN_MAX_ITER};

/// Row sums of `p * vol` must match one to this tolerance.
pub const KERNEL_ROW_TOLERANCE: f64 = 1e-8;

/// Marginal tolerance of the bridge solve.
pub const BRIDGE_TOLERANCE: f64 = 1e-11;

/// `p[i][j]`: density at cell `j` after time `tau` from the center of cell `i`.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    grid: Arc<Grid>,
    tau: f64,
    p: Vec<Vec<f64>>,
}

impl TransitionKernel {
    /// Analytic Ornstein-Uhlenbeck kernel of `Psi = lambda |x|^2 / 2` in 1D,
    /// as cell integrals of `N(x e^{-lambda tau}, (1 - e^{-2 lambda tau}) / lambda)`,
    /// renormalized to the box.
    pub fn ornstein_uhlenbeck(grid: Arc<Grid>, lambda: f64, tau: f64) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(Error::InvalidArgument("analytic kernel is 1D only".into()));
        }
        if !(tau > 0.0 && lambda > 0.0) {
            return Err(Error::InvalidArgument("tau and lambda must be positive".into()));
        }
        let decay = (-lambda * tau).exp();
        let sd = ((1.0 - (-2.0 * lambda * tau).exp()) / lambda).sqrt();
        let (lo, h, n) = (grid.lower()[0], grid.spacing(0), grid.n_cells());
        let vol = grid.cell_volume();
        let p = (0..n)
            .map(|i| {
                let mean = grid.cell_center(i)[0] * decay;
                let mut row: Vec<f64> = (0..n)
                    .map(|j| gaussian_interval_mass(lo + j as f64 * h, lo + (j + 1) as f64 * h, mean, sd))
                    .collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total * vol);
                row
            })
            .collect();
        Self::from_rows(grid, tau, p)
    }

    /// Kernel of the discrete semigroup: row `i` is `P_tau` of the unit mass at cell `i`.
    pub fn from_semigroup(op: &FPOperator, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
        }
        let grid = op.grid().clone();
        let vol = grid.cell_volume();
        let p = (0..grid.n_cells())
            .into_par_iter()
            .map(|i| {
                let out = op.evolve(&GridDensity::one_hot(grid.clone(), i)?, tau)?;
                Ok(out.masses().iter().map(|m| m / vol).collect())
            })
            .collect::<Result<_>>()?;
        Self::from_rows(grid, tau, p)
    }

    /// Analytic kernel when the operator's potential is quadratic in 1D, else the semigroup kernel.
    pub fn for_operator(op: &FPOperator, tau: f64) -> Result<Self> {
        match op.potential().analytic() {
            Some(AnalyticPotential::Quadratic { lambda }) if lambda > 0.0 && op.grid().dim() == 1 => {
                Self::ornstein_uhlenbeck(op.grid().clone(), lambda, tau)
            }
            _ => Self::from_semigroup(op, tau),
        }
    }

    pub fn from_rows(grid: Arc<Grid>, tau: f64, p: Vec<Vec<f64>>) -> Result<Self> {
        let n = grid.n_cells();
        if p.len() != n || p.iter().any(|r| r.len() != n) {
            return Err(Error::GridMismatch("kernel shape".into()));
        }
        let vol = grid.cell_volume();
        for (i, row) in p.iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!("kernel row {i} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum::<f64>() * vol;
            if (total - 1.0).abs() > KERNEL_ROW_TOLERANCE {
                return Err(Error::InvalidArgument(format!("kernel row {i} integrates to {total}")));
            }
        }
        Ok(Self { grid, tau, p })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.p
    }

    /// Second marginal of `rho0 ⊗ p`.
    pub fn push_forward(&self, rho0: &GridDensity) -> Result<GridDensity> {
        self.grid.check(rho0.grid(), "kernel")?;
        let vol = self.grid.cell_volume();
        let mut out = vec![0.0; self.grid.n_cells()];
        for (a, row) in rho0.masses().iter().zip(&self.p) {
            if *a > 0.0 {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += a * v * vol;
                }
            }
        }
        GridDensity::from_weights(self.grid.clone(), out)
    }
}

/// Optimal bridge coupling and its relative entropy.
#[derive(Debug, Clone)]
pub struct StaticRate {
    pub value: f64,
    pub coupling: Coupling,
    pub iterations: usize,
}

/// `min H(gamma | rho0 ⊗ p)` over couplings of `rho0` and `target`.
pub fn static_rate(rho0: &GridDensity, target: &GridDensity, kernel: &TransitionKernel) -> Result<StaticRate> {
    let grid = kernel.grid();
    grid.check(rho0.grid(), "static rate")?;
    grid.check(target.grid(), "static rate")?;
    let vol = grid.cell_volume();
    let s0: Vec<usize> = (0..rho0.len()).filter(|&i| rho0.masses()[i] > 0.0).collect();
    let s1: Vec<usize> = (0..target.len()).filter(|&j| target.masses()[j] > 0.0).collect();
    let m = s1.len();
    // log of the reference joint masses rho0_i p_ij vol
    let mut logr = Vec::with_capacity(s0.len() * m);
    for &i in &s0 {
        let la = rho0.masses()[i].ln();
        for &j in &s1 {
            let r = kernel.p[i][j] * vol;
            logr.push(if r > 0.0 { la + r.ln() } else { f64::NEG_INFINITY });
        }
    }
    for (c, &j) in s1.iter().enumerate() {
        if (0..s0.len()).all(|r| logr[r * m + c] == f64::NEG_INFINITY) {
            return Err(Error::InfeasibleTarget { cell: j });
        }
    }
    let a: Vec<f64> = s0.iter().map(|&i| rho0.masses()[i]).collect();
    let b: Vec<f64> = s1.iter().map(|&j| target.masses()[j]).collect();
    let sol = sinkhorn::solve_log(&a, &b, &logr, None, BRIDGE_TOLERANCE, SINKHORN_MAX_ITER)?;
    let plan = sinkhorn::plan(&logr, &sol);
    let mut value = 0.0;
    let mut entries = Vec::new();
    for (k, &g) in plan.iter().enumerate() {
        if g > 0.0 {
            value += g * (g.ln() - logr[k]);
            entries.push((s0[k / m], s1[k % m], g));
        }
    }
    Ok(StaticRate {
        value: value.max(0.0),
        coupling: Coupling::from_entries(rho0, target, entries),
        iterations: sol.iterations,
    })
}
