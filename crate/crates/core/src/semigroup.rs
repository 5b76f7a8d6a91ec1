//! Fokker-Planck evolution `d rho/dt = Lap rho + div(rho grad Psi)` with
//! Scharfetter-Gummel fluxes and implicit Euler time stepping.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity, GridSignedMeasure, Potential};
use crate::linalg::BandedLu;

/// Default upper bound on the implicit Euler step.
pub const DEFAULT_DT_MAX: f64 = 1e-3;

/// Bernoulli function `z / (e^z - 1)`, with `B(0) = 1`.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 - 0.5 * z + z * z / 12.0
    } else if z > 700.0 {
        z * (-z).exp()
    } else {
        z / z.exp_m1()
    }
}

/// Generator of the discrete Fokker-Planck equation acting on cell masses.
///
/// The mass flow across edge `i -> j` is
/// `s * (B(dPsi) p_i - B(-dPsi) p_j) / h^2` with `dPsi = Psi_j - Psi_i`,
/// where `s` is a time scale (1 unless built by [`FPOperator::scaled`]).
#[derive(Debug, Clone)]
pub struct FPOperator {
    grid: Arc<Grid>,
    potential: Potential,
    // per edge: coefficient of p_from and of p_to in the forward flow
    forward: Vec<f64>,
    backward: Vec<f64>,
    scale: f64,
    dt_max: f64,
}

pub fn assemble_generator(grid: &Arc<Grid>, pot: &Potential) -> Result<FPOperator> {
    grid.check(pot.grid(), "potential")?;
    let psi = pot.psi();
    let mut forward = Vec::with_capacity(grid.n_edges());
    let mut backward = Vec::with_capacity(grid.n_edges());
    for e in grid.edges() {
        let h2 = grid.spacing(e.axis).powi(2);
        let z = psi[e.to] - psi[e.from];
        forward.push(bernoulli(z) / h2);
        backward.push(bernoulli(-z) / h2);
    }
    Ok(FPOperator {
        grid: grid.clone(),
        potential: pot.clone(),
        forward,
        backward,
        scale: 1.0,
        dt_max: DEFAULT_DT_MAX,
    })
}

impl FPOperator {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    pub fn with_dt_max(mut self, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0) {
            return Err(Error::InvalidArgument(format!("dt_max {dt_max} must be positive")));
        }
        self.dt_max = dt_max;
        Ok(self)
    }

    /// The generator of the time-rescaled flow, `tau * A`.
    pub fn scaled(&self, tau: f64) -> FPOperator {
        let mut op = self.clone();
        op.scale *= tau;
        op
    }

    /// Mass flow across each edge in the `from -> to` direction.
    pub fn edge_flows(&self, p: &[f64]) -> Vec<f64> {
        self.grid
            .edges()
            .iter()
            .enumerate()
            .map(|(k, e)| self.scale * (self.forward[k] * p[e.from] - self.backward[k] * p[e.to]))
            .collect()
    }

    /// `A p` for a per-cell mass vector.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_cells()];
        for (e, q) in self.grid.edges().iter().zip(self.edge_flows(p)) {
            out[e.from] -= q;
            out[e.to] += q;
        }
        out
    }

    /// `A rho` as a zero-sum signed measure.
    pub fn apply_density(&self, rho: &GridDensity) -> Result<GridSignedMeasure> {
        self.grid.check(rho.grid(), "generator")?;
        Ok(GridSignedMeasure::from_parts_unchecked(
            self.grid.clone(),
            self.apply(rho.masses()),
        ))
    }

    /// Dense matrix of the generator (tests and small instances).
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.grid.n_cells();
        let mut a = vec![vec![0.0; n]; n];
        for (k, e) in self.grid.edges().iter().enumerate() {
            let f = self.scale * self.forward[k];
            let b = self.scale * self.backward[k];
            a[e.from][e.from] -= f;
            a[e.to][e.from] += f;
            a[e.to][e.to] -= b;
            a[e.from][e.to] += b;
        }
        a
    }

    /// Factorization of `I - dt A` for repeated implicit Euler steps.
    pub fn stepper(&self, dt: f64) -> Result<Stepper> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
        }
        let n = self.grid.n_cells();
        let bw = self.grid.bandwidth();
        let w = 2 * bw + 1;
        let mut a = vec![0.0; n * w];
        let mut add = |i: usize, j: usize, v: f64| a[i * w + (j + bw - i)] += v;
        for i in 0..n {
            add(i, i, 1.0);
        }
        for (k, e) in self.grid.edges().iter().enumerate() {
            let f = dt * self.scale * self.forward[k];
            let b = dt * self.scale * self.backward[k];
            add(e.from, e.from, f);
            add(e.to, e.from, -f);
            add(e.to, e.to, b);
            add(e.from, e.to, -b);
        }
        Ok(Stepper {
            grid: self.grid.clone(),
            lu: BandedLu::factor(n, bw, a)?,
            dt,
        })
    }

    /// `P_t rho` by implicit Euler with `ceil(t / dt_max)` equal steps.
    pub fn evolve(&self, rho: &GridDensity, t: f64) -> Result<GridDensity> {
        self.grid.check(rho.grid(), "evolve")?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("time {t} must be nonnegative")));
        }
        if t == 0.0 {
            return Ok(rho.clone());
        }
        let steps = (t / self.dt_max).ceil().max(1.0) as usize;
        self.stepper(t / steps as f64)?.run(rho, steps)
    }

    /// Implicit Euler with a prescribed step and count.
    pub fn evolve_steps(&self, rho: &GridDensity, dt: f64, steps: usize) -> Result<GridDensity> {
        self.grid.check(rho.grid(), "evolve")?;
        if steps == 0 {
            return Ok(rho.clone());
        }
        self.stepper(dt)?.run(rho, steps)
    }
}

/// Free function form of [`FPOperator::evolve`].
pub fn evolve(rho: &GridDensity, op: &FPOperator, t: f64) -> Result<GridDensity> {
    op.evolve(rho, t)
}

/// A factorized implicit Euler step.
#[derive(Debug, Clone)]
pub struct Stepper {
    grid: Arc<Grid>,
    lu: BandedLu,
    dt: f64,
}

impl Stepper {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step on raw masses. Rounding-level negatives are clipped and the
    /// mass is restored to one.
    pub fn step_masses(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.lu.solve(p);
        let mut total = 0.0;
        for v in next.iter_mut() {
            if !v.is_finite() {
                return Err(Error::LinearSolveFailure("non-finite implicit Euler iterate".into()));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
            total += *v;
        }
        if !(total > 0.0) {
            return Err(Error::LinearSolveFailure("implicit Euler lost all mass".into()));
        }
        next.iter_mut().for_each(|v| *v /= total);
        Ok(next)
    }

    pub fn step(&self, rho: &GridDensity) -> Result<GridDensity> {
        self.grid.check(rho.grid(), "step")?;
        Ok(GridDensity::from_parts_unchecked(self.grid.clone(), self.step_masses(rho.masses())?))
    }

    pub fn run(&self, rho: &GridDensity, steps: usize) -> Result<GridDensity> {
        self.grid.check(rho.grid(), "step")?;
        let mut p = rho.masses().to_vec();
        for _ in 0..steps {
            p = self.step_masses(&p)?;
        }
        Ok(GridDensity::from_parts_unchecked(self.grid.clone(), p))
    }

    /// All iterates, starting with `rho` itself.
    pub fn trajectory(&self, rho: &GridDensity, steps: usize) -> Result<Vec<GridDensity>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(rho.clone());
        for k in 0..steps {
            let next = self.step(&out[k])?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Mean and variance of the Ornstein-Uhlenbeck flow for `Psi = x^2/2`.
pub fn ou_reference(m0: f64, var0: f64, t: f64) -> (f64, f64) {
    (m0 * (-t).exp(), 1.0 + (var0 - 1.0) * (-2.0 * t).exp())
}
