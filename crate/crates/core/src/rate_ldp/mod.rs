//! Bounds on the rate functional `I_tau` of the rescaled empirical process.
//!
//! The upper bound is the controlled action of an explicit recovery curve:
//! heat `rho0` for a time `eps`, follow the `eps`-smoothed displacement
//! interpolation, then run the heat flow of `rho1` backwards. The lower
//! reference is `W2^2 / (4 tau) + (F(rho1) - F(rho0)) / 2`. The static form
//! is a Schrödinger bridge against the transition kernel.

mod kernel;
mod sweep;

use rayon::prelude::*;

use crate::dynamic_action::{controlled_action, DiscreteCurve};
use crate::error::{Error, Result};
use crate::functionals::{fisher_information_metric, free_energy, Extended};
use crate::grid::GridDensity;
use crate::semigroup::{FPOperator, Stepper};
use crate::static_ot::{displacement_interpolation, w2_squared, GeodesicCurve};

pub use kernel::{static_rate, StaticRate, TransitionKernel};
pub use sweep::{gamma_sweep, GammaSweepConfig, GammaSweepRecord, SweepOutcome, SWEEP_CSV_HEADER};

/// Steps per segment when none is given.
pub const DEFAULT_K_PER_SEGMENT: usize = 64;

/// Number of points `0.2 * 2^-k`, `k = 0..`, in the dyadic `eps` grid.
pub const EPS_GRID_LEN: usize = 11;
pub const EPS_MAX: f64 = 0.2;

/// Largest `eps` first.
pub fn eps_grid() -> Vec<f64> {
    (0..EPS_GRID_LEN).map(|k| EPS_MAX * 0.5f64.powi(k as i32)).collect()
}

/// `h(eps)`: trapezoid rule in time of the metric Fisher information of the
/// `eps`-evolved geodesic samples.
pub fn h_of_epsilon(geodesic: &GeodesicCurve, op: &FPOperator, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let t = &geodesic.times;
    if t.len() < 2 {
        return Err(Error::InvalidArgument("geodesic needs two samples".into()));
    }
    let g: Vec<f64> = geodesic
        .densities
        .par_iter()
        .map(|rho| {
            let smoothed = op.evolve(rho, eps)?;
            match fisher_information_metric(&smoothed, op)? {
                Extended::Finite(v) => Ok(v),
                Extended::Infinite => Err(Error::InfiniteAction { slices: vec![] }),
            }
        })
        .collect::<Result<_>>()?;
    Ok(t.windows(2).zip(g.windows(2)).map(|(tw, gw)| 0.5 * (tw[1] - tw[0]) * (gw[0] + gw[1])).sum())
}

/// `h` tabulated on the dyadic grid; inverts `g(eps) = sqrt(eps / h(eps))`.
#[derive(Debug, Clone)]
pub struct EpsilonSchedule {
    /// Largest first.
    pub eps: Vec<f64>,
    pub h: Vec<f64>,
    /// Endpoints coincide; every `tau` maps to zero.
    pub degenerate: bool,
}

impl EpsilonSchedule {
    pub fn new(geodesic: &GeodesicCurve, op: &FPOperator) -> Result<Self> {
        let (first, last) = match (geodesic.densities.first(), geodesic.densities.last()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::InvalidArgument("empty geodesic".into())),
        };
        let eps = eps_grid();
        if first == last {
            return Ok(Self {
                h: vec![0.0; eps.len()],
                eps,
                degenerate: true,
            });
        }
        let h = eps.iter().map(|&e| h_of_epsilon(geodesic, op, e)).collect::<Result<_>>()?;
        Ok(Self {
            eps,
            h,
            degenerate: false,
        })
    }

    /// `g(eps)`; infinite where `h` vanishes.
    pub fn g(&self, idx: usize) -> f64 {
        if self.h[idx] > 0.0 {
            (self.eps[idx] / self.h[idx]).sqrt()
        } else {
            f64::INFINITY
        }
    }

    /// Index of `inf { eps in grid : g(eps) > tau }`.
    pub fn index(&self, tau: f64) -> Result<Option<usize>> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
        }
        if self.degenerate {
            return Ok(None);
        }
        if !(self.g(0) > tau) {
            return Err(Error::ScheduleOutOfRange { tau, g_max: self.g(0) });
        }
        // g is nondecreasing in eps, so walk down the grid
        let mut idx = 0;
        while idx + 1 < self.eps.len() && self.g(idx + 1) > tau {
            idx += 1;
        }
        Ok(Some(idx))
    }

    pub fn epsilon(&self, tau: f64) -> Result<f64> {
        Ok(self.index(tau)?.map_or(0.0, |i| self.eps[i]))
    }

    /// `h(eps(tau))`, zero in the degenerate case.
    pub fn h_at(&self, tau: f64) -> Result<f64> {
        Ok(self.index(tau)?.map_or(0.0, |i| self.h[i]))
    }
}

/// `eps(tau)` as the generalized inverse of `g` on the dyadic grid.
pub fn epsilon_schedule(geodesic: &GeodesicCurve, op: &FPOperator, tau: f64) -> Result<f64> {
    EpsilonSchedule::new(geodesic, op)?.epsilon(tau)
}

/// Uniform geodesic samples with the endpoints pinned exactly.
pub fn geodesic_samples(rho0: &GridDensity, rho1: &GridDensity, k: usize) -> Result<GeodesicCurve> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let times: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let mut geo = displacement_interpolation(rho0, rho1, &times)?;
    geo.densities[0] = rho0.clone();
    geo.densities[k] = rho1.clone();
    Ok(geo)
}

/// Three-segment curve: heat-up, smoothed geodesic, heat-down.
#[derive(Debug, Clone)]
pub struct RecoveryCurve {
    pub epsilon: f64,
    /// One constant segment when `epsilon = 0`, else three.
    pub segments: Vec<DiscreteCurve>,
    pub curve: DiscreteCurve,
}

/// Implicit Euler smoothing used for every segment, so junctions are bitwise identical.
struct Smoother {
    stepper: Stepper,
    substeps: usize,
    k: usize,
}

impl Smoother {
    fn new(op: &FPOperator, eps: f64, k: usize) -> Result<Self> {
        let substeps = (eps / (k as f64 * op.dt_max())).ceil().max(1.0) as usize;
        Ok(Self {
            stepper: op.stepper(eps / (k * substeps) as f64)?,
            substeps,
            k,
        })
    }

    /// `P_{j eps / K} rho` for `j = 0..=K`.
    fn samples(&self, rho: &GridDensity) -> Result<Vec<GridDensity>> {
        let mut out = Vec::with_capacity(self.k + 1);
        out.push(rho.clone());
        for j in 0..self.k {
            let next = self.stepper.run(&out[j], self.substeps)?;
            out.push(next);
        }
        Ok(out)
    }

    fn full(&self, rho: &GridDensity) -> Result<GridDensity> {
        self.stepper.run(rho, self.k * self.substeps)
    }
}

/// Recovery curve with `eps` from the schedule.
pub fn build_recovery_curve(
    rho0: &GridDensity,
    rho1: &GridDensity,
    op: &FPOperator,
    tau: f64,
    k_per_segment: usize,
) -> Result<RecoveryCurve> {
    let geo = geodesic_samples(rho0, rho1, k_per_segment)?;
    let schedule = EpsilonSchedule::new(&geo, op)?;
    recovery_curve_with_eps(&geo, op, schedule.epsilon(tau)?)
}

/// Recovery curve for a given `eps` over pinned geodesic samples.
pub fn recovery_curve_with_eps(geodesic: &GeodesicCurve, op: &FPOperator, eps: f64) -> Result<RecoveryCurve> {
    let dens = &geodesic.densities;
    let k = dens.len().saturating_sub(1);
    if k == 0 {
        return Err(Error::InvalidArgument("geodesic needs two samples".into()));
    }
    if !(0.0..0.25).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [0, 1/4)")));
    }
    if eps == 0.0 {
        if dens[0] != dens[k] {
            return Err(Error::InvalidArgument("eps = 0 requires equal endpoints".into()));
        }
        let curve = DiscreteCurve::uniform(vec![dens[0].clone(); k + 1])?;
        return Ok(RecoveryCurve {
            epsilon: 0.0,
            segments: vec![curve.clone()],
            curve,
        });
    }
    let smoother = Smoother::new(op, eps, k)?;
    let up = smoother.samples(&dens[0])?;
    let down = smoother.samples(&dens[k])?;
    let mut middle: Vec<GridDensity> = dens[1..k].par_iter().map(|r| smoother.full(r)).collect::<Result<_>>()?;
    middle.insert(0, up[k].clone());
    middle.push(down[k].clone());

    let step = |a: f64, b: f64, j: usize| a + (b - a) * j as f64 / k as f64;
    let grid_times = |a: f64, b: f64| -> Vec<f64> {
        let mut t: Vec<f64> = (0..=k).map(|j| step(a, b, j)).collect();
        t[k] = b;
        t
    };
    let seg_up = DiscreteCurve::new(grid_times(0.0, eps), up)?;
    let seg_mid = DiscreteCurve::new(grid_times(eps, 1.0 - eps), middle)?;
    let seg_down = DiscreteCurve::new(grid_times(1.0 - eps, 1.0), down.into_iter().rev().collect())?;
    let curve = seg_up.concat(&seg_mid)?.concat(&seg_down)?;
    Ok(RecoveryCurve {
        epsilon: eps,
        segments: vec![seg_up, seg_mid, seg_down],
        curve,
    })
}

fn finite_action(curve: &DiscreteCurve, op: &FPOperator, tau: f64) -> Result<f64> {
    match controlled_action(curve, op, tau)? {
        Extended::Finite(v) => Ok(v),
        Extended::Infinite => Err(Error::InfiniteAction {
            slices: crate::dynamic_action::infeasible_slices(curve)?,
        }),
    }
}

/// Controlled action of the recovery curve with [`DEFAULT_K_PER_SEGMENT`].
pub fn rate_upper(rho0: &GridDensity, rho1: &GridDensity, op: &FPOperator, tau: f64) -> Result<f64> {
    rate_upper_with(rho0, rho1, op, tau, DEFAULT_K_PER_SEGMENT)
}

pub fn rate_upper_with(rho0: &GridDensity, rho1: &GridDensity, op: &FPOperator, tau: f64, k: usize) -> Result<f64> {
    let rc = build_recovery_curve(rho0, rho1, op, tau, k)?;
    finite_action(&rc.curve, op, tau)
}

/// `W2^2 / (4 tau) + (F(rho1) - F(rho0)) / 2`.
pub fn rate_lower_reference(rho0: &GridDensity, rho1: &GridDensity, op: &FPOperator, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
    }
    let w2sq = w2_squared(rho0, rho1)?;
    let pot = op.potential();
    Ok(w2sq / (4.0 * tau) + 0.5 * (free_energy(rho1, pot)? - free_energy(rho0, pot)?))
}
