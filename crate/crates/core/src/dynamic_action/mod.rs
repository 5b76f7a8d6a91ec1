//! Discrete curves of densities, the Benamou-Brenier kinetic action and the
//! controlled action of the time-rescaled Fokker-Planck flow.
//!
//! Every slice norm is taken in `H^-1` weighted by the midpoint density
//! `(rho_k + rho_{k+1}) / 2`, so the controlled action splits exactly into
//! a kinetic, a cross and a Fisher term.

mod pdhg;
mod reduced;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functionals::{hm1_norm, Extended};
use crate::grid::{divergence, weighted_laplacian, EdgeField, Grid, GridDensity, GridSignedMeasure};
use crate::linalg::dot;
use crate::semigroup::FPOperator;

pub use pdhg::{
    minimize_controlled_action, minimize_controlled_action_with, minimize_kinetic_action, ControlledMinimum,
    Method, MinimizeOptions,
};

/// Constant of the discretization budget `tol_chain = C (dt + h^2)`.
///
/// Twice the largest normalized defect (entropy dissipation residual,
/// chain-rule cross term, action of the discrete flow) over Gaussian
/// Ornstein-Uhlenbeck curves on 256 cells of `[-6, 6]`, rounded. Frozen.
pub const TOL_CHAIN_CONSTANT: f64 = 1.2;

/// Slack allowed in the lower-bound chain for time step `dt` and spacing `h`.
pub fn tol_chain(dt: f64, h: f64) -> f64 {
    TOL_CHAIN_CONSTANT * (dt + h * h)
}

/// A time-sampled curve of densities on one grid.
#[derive(Debug, Clone)]
pub struct DiscreteCurve {
    times: Vec<f64>,
    densities: Vec<GridDensity>,
    momenta: Option<Vec<EdgeField>>,
    residual: f64,
}

impl DiscreteCurve {
    /// Times must be finite and strictly increasing, one per density.
    pub fn new(times: Vec<f64>, densities: Vec<GridDensity>) -> Result<Self> {
        if times.len() != densities.len() {
            return Err(Error::InvalidArgument(format!(
                "{} times for {} densities",
                times.len(),
                densities.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InvalidArgument("a curve needs at least two samples".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("curve times must be strictly increasing".into()));
        }
        let grid = densities[0].grid().clone();
        for d in &densities[1..] {
            grid.check(d.grid(), "curve")?;
        }
        Ok(DiscreteCurve {
            times,
            densities,
            momenta: None,
            residual: 0.0,
        })
    }

    /// Uniform times on `[0, 1]`.
    pub fn uniform(densities: Vec<GridDensity>) -> Result<Self> {
        let k = densities.len().saturating_sub(1).max(1) as f64;
        let times = (0..densities.len()).map(|i| i as f64 / k).collect();
        Self::new(times, densities)
    }

    /// Attaches one momentum per step and records the continuity residual
    /// `max |(rho_{k+1} - rho_k) / dt + div m_k - source_k|`.
    pub fn with_momenta(mut self, momenta: Vec<EdgeField>, sources: Option<&[Vec<f64>]>) -> Result<Self> {
        if momenta.len() != self.steps() {
            return Err(Error::InvalidArgument(format!(
                "{} momenta for {} steps",
                momenta.len(),
                self.steps()
            )));
        }
        if let Some(s) = sources {
            if s.len() != self.steps() {
                return Err(Error::InvalidArgument("one source per step required".into()));
            }
        }
        let grid = self.grid().clone();
        let mut residual: f64 = 0.0;
        for (k, m) in momenta.iter().enumerate() {
            grid.check(m.grid(), "momentum")?;
            let div = divergence(m, &grid)?;
            let dt = self.dt(k);
            let (a, b) = (self.densities[k].masses(), self.densities[k + 1].masses());
            for i in 0..grid.n_cells() {
                let src = sources.map_or(0.0, |s| s[k][i]);
                residual = residual.max(((b[i] - a[i]) / dt + div.values()[i] - src).abs());
            }
        }
        self.momenta = Some(momenta);
        self.residual = residual;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn densities(&self) -> &[GridDensity] {
        &self.densities
    }

    pub fn momenta(&self) -> Option<&[EdgeField]> {
        self.momenta.as_deref()
    }

    /// Continuity residual recorded by [`DiscreteCurve::with_momenta`].
    pub fn continuity_residual(&self) -> f64 {
        self.residual
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.densities[0].grid()
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn first(&self) -> &GridDensity {
        &self.densities[0]
    }

    pub fn last(&self) -> &GridDensity {
        &self.densities[self.densities.len() - 1]
    }

    /// `(rho_k + rho_{k+1}) / 2`.
    pub fn midpoint(&self, k: usize) -> GridDensity {
        let m = self.densities[k]
            .masses()
            .iter()
            .zip(self.densities[k + 1].masses())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        GridDensity::from_parts_unchecked(self.grid().clone(), m)
    }

    /// Appends `next`, which must start where `self` ends (same time and
    /// identical masses); momenta are dropped.
    pub fn concat(&self, next: &DiscreteCurve) -> Result<DiscreteCurve> {
        self.grid().check(next.grid(), "concat")?;
        let gap = (next.times[0] - self.times[self.times.len() - 1]).abs();
        if gap > 1e-12 {
            return Err(Error::InvalidArgument(format!("curves meet with a time gap of {gap:e}")));
        }
        let jump = self.last().l1_distance(next.first());
        if jump > 1e-12 {
            return Err(Error::InvalidArgument(format!("curves meet with a mass jump of {jump:e}")));
        }
        let mut times = self.times.clone();
        let mut densities = self.densities.clone();
        times.extend_from_slice(&next.times[1..]);
        densities.extend_from_slice(&next.densities[1..]);
        DiscreteCurve::new(times, densities)
    }

    /// `time,cell,mass` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,cell,mass\n");
        for (t, d) in self.times.iter().zip(&self.densities) {
            for (i, m) in d.masses().iter().enumerate() {
                out.push_str(&format!("{t},{i},{m}\n"));
            }
        }
        out
    }
}

/// Slice quantities in `H^-1(rho_{k+1/2})`: `|s|^2`, `<s, a>`, `|a|^2` with
/// `s` the difference quotient and `a = A rho_{k+1/2}`, plus
/// `|s - tau a|^2` from its own solve.
#[derive(Debug, Clone, Copy)]
struct SliceTerms {
    ss: f64,
    sa: f64,
    aa: f64,
    dd: f64,
}

fn slice_terms(curve: &DiscreteCurve, k: usize, op: Option<&FPOperator>, tau: f64) -> Result<Option<SliceTerms>> {
    let mid = curve.midpoint(k);
    let dt = curve.dt(k);
    let s: Vec<f64> = curve.densities[k + 1]
        .masses()
        .iter()
        .zip(curve.densities[k].masses())
        .map(|(b, a)| (b - a) / dt)
        .collect();
    let solver = weighted_laplacian(&mid).solver()?;
    match solver.check_balance(&s) {
        Ok(()) => {}
        Err(Error::InfeasibleSupport { .. }) => return Ok(None),
        Err(e) => return Err(e),
    }
    let f = solver.solve(&s)?;
    let ss = dot(&s, &f).max(0.0);
    let Some(op) = op else {
        return Ok(Some(SliceTerms {
            ss,
            sa: 0.0,
            aa: 0.0,
            dd: ss,
        }));
    };
    let a = op.apply(mid.masses());
    let g = solver.solve(&a)?;
    let d: Vec<f64> = s.iter().zip(&a).map(|(s, a)| s - tau * a).collect();
    let fd = solver.solve(&d)?;
    Ok(Some(SliceTerms {
        ss,
        sa: dot(&s, &g),
        aa: dot(&a, &g).max(0.0),
        dd: dot(&d, &fd).max(0.0),
    }))
}

fn all_slices(curve: &DiscreteCurve, op: Option<&FPOperator>, tau: f64) -> Result<Vec<Option<SliceTerms>>> {
    if let Some(op) = op {
        curve.grid().check(op.grid(), "action")?;
    }
    (0..curve.steps())
        .into_par_iter()
        .map(|k| slice_terms(curve, k, op, tau))
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau {tau} must be positive")))
    }
}

/// `sum_k dt_k |(rho_{k+1} - rho_k) / dt_k|^2_{-1, rho_{k+1/2}}`.
pub fn kinetic_action(curve: &DiscreteCurve) -> Result<Extended> {
    let slices = all_slices(curve, None, 1.0)?;
    let mut total = 0.0;
    for (k, s) in slices.iter().enumerate() {
        match s {
            Some(t) => total += curve.dt(k) * t.ss,
            None => return Ok(Extended::Infinite),
        }
    }
    Ok(Extended::Finite(total))
}

/// Per-slice speeds `|(rho_{k+1} - rho_k) / dt_k|_{-1, rho_{k+1/2}}`.
pub fn slice_speeds(curve: &DiscreteCurve) -> Result<Vec<Extended>> {
    Ok(all_slices(curve, None, 1.0)?
        .into_iter()
        .map(|s| s.map_or(Extended::Infinite, |t| Extended::Finite(t.ss.sqrt())))
        .collect())
}

/// `sum_k dt_k / (4 tau) |(rho_{k+1} - rho_k) / dt_k - tau A rho_{k+1/2}|^2`
/// in `H^-1(rho_{k+1/2})`.
pub fn controlled_action(curve: &DiscreteCurve, op: &FPOperator, tau: f64) -> Result<Extended> {
    check_tau(tau)?;
    let slices = all_slices(curve, Some(op), tau)?;
    let mut total = 0.0;
    for (k, s) in slices.iter().enumerate() {
        match s {
            Some(t) => total += curve.dt(k) / (4.0 * tau) * t.dd,
            None => return Ok(Extended::Infinite),
        }
    }
    Ok(Extended::Finite(total))
}

/// Indices of slices whose difference quotient cannot be carried by the
/// midpoint support.
pub fn infeasible_slices(curve: &DiscreteCurve) -> Result<Vec<usize>> {
    Ok(all_slices(curve, None, 1.0)?
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(k, _)| k)
        .collect())
}

/// The three addends of the controlled action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionParts {
    /// `(1 / 4 tau) int |d rho|^2`.
    pub kinetic_over_4tau: f64,
    /// `-1/2 int <d rho, A rho>`.
    pub entropy_cross_term: f64,
    /// `(tau / 4) int |A rho|^2`.
    pub fisher_term: f64,
}

impl ActionParts {
    pub fn total(&self) -> f64 {
        self.kinetic_over_4tau + self.entropy_cross_term + self.fisher_term
    }
}

/// Splits the controlled action slice by slice; fails with
/// [`Error::InfiniteAction`] naming the infeasible slices.
pub fn action_decomposition(curve: &DiscreteCurve, op: &FPOperator, tau: f64) -> Result<ActionParts> {
    check_tau(tau)?;
    let slices = all_slices(curve, Some(op), tau)?;
    let bad: Vec<usize> = (0..slices.len()).filter(|&k| slices[k].is_none()).collect();
    if !bad.is_empty() {
        return Err(Error::InfiniteAction { slices: bad });
    }
    let mut parts = ActionParts {
        kinetic_over_4tau: 0.0,
        entropy_cross_term: 0.0,
        fisher_term: 0.0,
    };
    for (k, s) in slices.iter().enumerate() {
        let t = s.expect("checked above");
        let dt = curve.dt(k);
        parts.kinetic_over_4tau += dt * t.ss / (4.0 * tau);
        parts.entropy_cross_term -= 0.5 * dt * t.sa;
        parts.fisher_term += dt * tau * t.aa / 4.0;
    }
    Ok(parts)
}

/// Momenta realizing the controlled action: `m_k` has divergence
/// `-(s_k - tau A rho_{k+1/2})`. Returns the momenta and the sources
/// `tau A rho_{k+1/2}`.
pub(crate) fn optimal_momenta(
    curve: &DiscreteCurve,
    op: Option<&FPOperator>,
    tau: f64,
) -> Result<(Vec<EdgeField>, Vec<Vec<f64>>)> {
    let grid = curve.grid().clone();
    (0..curve.steps())
        .into_par_iter()
        .map(|k| {
            let mid = curve.midpoint(k);
            let dt = curve.dt(k);
            let src = op.map_or(vec![0.0; grid.n_cells()], |op| {
                op.apply(mid.masses()).iter().map(|a| tau * a).collect()
            });
            let d: Vec<f64> = (0..grid.n_cells())
                .map(|i| (curve.densities[k + 1].masses()[i] - curve.densities[k].masses()[i]) / dt - src[i])
                .collect();
            let sol = hm1_norm(&GridSignedMeasure::from_parts_unchecked(grid.clone(), d), &mid)?;
            Ok((sol.flux_m, src))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::free_energy;
    use crate::grid::{AnalyticPotential, Potential};
    use crate::semigroup::assemble_generator;
    use crate::static_ot::{displacement_interpolation, w2_squared};

    fn setup(n: usize, lo: f64, hi: f64) -> (Arc<Grid>, FPOperator) {
        let g = Arc::new(Grid::new_1d(lo, hi, n).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        let op = assemble_generator(&g, &pot).unwrap();
        (g, op)
    }

    fn geodesic(a: &GridDensity, b: &GridDensity, k: usize) -> DiscreteCurve {
        let times: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        let geo = displacement_interpolation(a, b, &times).unwrap();
        DiscreteCurve::new(geo.times, geo.densities).unwrap()
    }

    #[test]
    fn constant_curve_has_zero_action() {
        let (g, op) = setup(32, -4.0, 4.0);
        let rho = GridDensity::gaussian(g, &[0.3], 0.7).unwrap();
        let c = DiscreteCurve::uniform(vec![rho.clone(); 5]).unwrap();
        assert_eq!(kinetic_action(&c).unwrap(), Extended::Finite(0.0));
        let gibbs = op.potential().gibbs_density();
        let c = DiscreteCurve::uniform(vec![gibbs; 4]).unwrap();
        let parts = action_decomposition(&c, &op, 0.1).unwrap();
        assert!(parts.kinetic_over_4tau.abs() < 1e-30);
        assert!(parts.entropy_cross_term.abs() < 1e-20);
        assert!(parts.fisher_term.abs() < 1e-20);
        assert!(controlled_action(&c, &op, 0.1).unwrap().finite().unwrap() < 1e-20);
    }

    #[test]
    fn single_hop_by_hand() {
        // two cells of width h, mass 1/2 moving from cell 0 to 1 in unit time:
        // midpoint (3/4, 1/4), theta = 1/(2h), weight theta vol / h^2 = 1/(2 h^2),
        // s = (-1/2, 1/2), L = w [[1, -1], [-1, 1]]
        let h = 0.5;
        let g = Arc::new(Grid::new_1d(0.0, 2.0 * h, 2).unwrap());
        let a = GridDensity::new(g.clone(), vec![1.0, 0.0]).unwrap();
        let b = GridDensity::new(g.clone(), vec![0.5, 0.5]).unwrap();
        let c = DiscreteCurve::uniform(vec![a, b]).unwrap();
        let w = 1.0 / (2.0 * h * h);
        // L f = s with f = (0, 1/(2w)), s^T f = 1/(4w)
        let expected = 1.0 / (4.0 * w);
        let got = kinetic_action(&c).unwrap().finite().unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} {expected}");
    }

    #[test]
    fn gap_in_support_is_infinite() {
        let g = Arc::new(Grid::new_1d(0.0, 4.0, 4).unwrap());
        let a = GridDensity::one_hot(g.clone(), 0).unwrap();
        let b = GridDensity::one_hot(g.clone(), 3).unwrap();
        let c = DiscreteCurve::uniform(vec![a, b]).unwrap();
        assert_eq!(kinetic_action(&c).unwrap(), Extended::Infinite);
        assert_eq!(infeasible_slices(&c).unwrap(), vec![0]);
        let (_, op) = setup(4, 0.0, 4.0);
        match action_decomposition(&c, &op, 0.1) {
            Err(Error::InfiniteAction { slices }) => assert_eq!(slices, vec![0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn geodesic_action_and_constant_speed() {
        let (g, _) = setup(256, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[-0.5], 1.0).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 1.0).unwrap();
        let w2 = w2_squared(&a, &b).unwrap();
        let c = geodesic(&a, &b, 64);
        let kin = kinetic_action(&c).unwrap().finite().unwrap();
        assert!((kin - w2).abs() < 0.02 * w2, "{kin} {w2}");
        let speeds: Vec<f64> = slice_speeds(&c).unwrap().iter().map(|s| s.finite().unwrap()).collect();
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        for s in speeds {
            assert!((s - mean).abs() < 0.03 * mean);
        }
    }

    #[test]
    fn decomposition_sums_to_total_and_cross_term_tracks_entropy() {
        let (g, op) = setup(128, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.3).unwrap();
        let c = geodesic(&a, &b, 64);
        let tau = 0.1;
        let parts = action_decomposition(&c, &op, tau).unwrap();
        let total = controlled_action(&c, &op, tau).unwrap().finite().unwrap();
        assert!((parts.total() - total).abs() <= 1e-10 * total.max(1.0));
        let pot = op.potential();
        let half_df = 0.5 * (free_energy(&b, pot).unwrap() - free_energy(&a, pot).unwrap());
        let h = g.spacing(0);
        assert!(
            (parts.entropy_cross_term - half_df).abs() <= tol_chain(1.0 / 64.0, h),
            "{} {half_df}",
            parts.entropy_cross_term
        );
    }

    #[test]
    fn flow_trajectory_has_small_controlled_action() {
        let (g, op) = setup(128, -6.0, 6.0);
        let rho0 = GridDensity::gaussian(g.clone(), &[1.0], 0.6).unwrap();
        let tau = 0.1;
        let k = 64;
        let dt = 1.0 / k as f64;
        let traj = op.scaled(tau).stepper(dt).unwrap().trajectory(&rho0, k).unwrap();
        let c = DiscreteCurve::uniform(traj).unwrap();
        let v = controlled_action(&c, &op, tau).unwrap().finite().unwrap();
        assert!(v < tol_chain(dt, g.spacing(0)), "{v}");
        // by comparison the geodesic to the same endpoint costs order 1/tau
        let geo = geodesic(&rho0, c.last(), k);
        assert!(controlled_action(&geo, &op, tau).unwrap().finite().unwrap() > 10.0 * v);
    }

    #[test]
    fn momenta_satisfy_continuity() {
        let (g, op) = setup(64, -5.0, 5.0);
        let a = GridDensity::gaussian(g.clone(), &[-1.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[1.0], 0.8).unwrap();
        let c = geodesic(&a, &b, 8);
        let (m, src) = optimal_momenta(&c, Some(&op), 0.2).unwrap();
        let c = c.with_momenta(m, Some(&src)).unwrap();
        assert!(c.continuity_residual() < 1e-9, "{}", c.continuity_residual());
    }

    #[test]
    fn concat_checks_junction() {
        let (g, _) = setup(16, -2.0, 2.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.5).unwrap();
        let c1 = DiscreteCurve::new(vec![0.0, 0.5], vec![a.clone(), b.clone()]).unwrap();
        let c2 = DiscreteCurve::new(vec![0.5, 1.0], vec![b.clone(), a.clone()]).unwrap();
        let c = c1.concat(&c2).unwrap();
        assert_eq!(c.steps(), 2);
        let c3 = DiscreteCurve::new(vec![0.5, 1.0], vec![a.clone(), b]).unwrap();
        assert!(c1.concat(&c3).is_err());
        assert!(c.to_csv().starts_with("time,cell,mass\n0,0,"));
    }
}
