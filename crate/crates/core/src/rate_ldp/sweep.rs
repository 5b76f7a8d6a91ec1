//! The sweep of the rate gap `I_upper - W2^2 / (4 tau)` towards `dF / 2`.

use std::time::Instant;

use rayon::prelude::*;

use super::{finite_action, geodesic_samples, recovery_curve_with_eps, EpsilonSchedule, DEFAULT_K_PER_SEGMENT};
use crate::dynamic_action::{tol_chain, DiscreteCurve};
use crate::error::{Error, Result};
use crate::functionals::free_energy;
use crate::grid::GridDensity;
use crate::semigroup::FPOperator;
use crate::static_ot::w2_squared;

pub const SWEEP_CSV_HEADER: &str = "tau,epsilon,i_upper,w2sq_over_4tau,gap,half_delta_f,err,h_eps,seconds";

#[derive(Debug, Clone)]
pub struct GammaSweepConfig {
    pub rho0: GridDensity,
    pub rho1: GridDensity,
    pub op: FPOperator,
    pub taus: Vec<f64>,
    pub k_per_segment: usize,
    /// Wall time makes the CSV machine dependent; off by default.
    pub record_wall_time: bool,
}

impl GammaSweepConfig {
    pub fn new(rho0: GridDensity, rho1: GridDensity, op: FPOperator) -> Self {
        Self {
            rho0,
            rho1,
            op,
            taus: vec![0.2, 0.1, 0.05, 0.025],
            k_per_segment: DEFAULT_K_PER_SEGMENT,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSweepRecord {
    pub tau: f64,
    pub epsilon: f64,
    pub i_upper: f64,
    pub i_lower_reference: f64,
    pub w2sq_over_4tau: f64,
    /// `i_upper - w2sq_over_4tau`.
    pub gap: f64,
    /// Target of the gap, `(F(rho1) - F(rho0)) / 2`.
    pub half_delta_f: f64,
    pub err: f64,
    pub h_eps: f64,
    /// Discretization slack of the recovery curve.
    pub tol_chain: f64,
    /// Zero unless wall time is recorded.
    pub seconds: f64,
}

impl GammaSweepRecord {
    /// `gap >= target - tol_chain`.
    pub fn lower_bound_holds(&self) -> bool {
        self.gap >= self.half_delta_f - self.tol_chain
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.tau,
            self.epsilon,
            self.i_upper,
            self.w2sq_over_4tau,
            self.gap,
            self.half_delta_f,
            self.err,
            self.h_eps,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// In the order of the configured taus, failed entries omitted.
    pub records: Vec<GammaSweepRecord>,
    pub failures: Vec<(f64, Error)>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Human-readable invariant violations; empty when all hold.
    ///
    /// `err` may rise by at most `noise` relative to its previous value.
    pub fn violations(&self, noise: f64) -> Vec<String> {
        let mut v: Vec<String> = self
            .records
            .iter()
            .filter(|r| !r.lower_bound_holds())
            .map(|r| format!("tau {}: gap {} below target {} - tol {}", r.tau, r.gap, r.half_delta_f, r.tol_chain))
            .collect();
        for w in self.records.windows(2) {
            if w[1].tau < w[0].tau && w[1].err.abs() > w[0].err.abs() * (1.0 + noise) {
                v.push(format!("tau {}: |err| {} rose from {}", w[1].tau, w[1].err, w[0].err));
            }
        }
        v
    }
}

/// Largest step and finest spacing of a curve.
pub(crate) fn curve_tol_chain(curve: &DiscreteCurve) -> f64 {
    let dt = (0..curve.steps()).map(|k| curve.dt(k)).fold(0.0, f64::max);
    tol_chain(dt, curve.grid().min_spacing())
}

/// One record per tau; entries are independent and run in parallel.
pub fn gamma_sweep(config: &GammaSweepConfig) -> Result<SweepOutcome> {
    let GammaSweepConfig {
        rho0,
        rho1,
        op,
        taus,
        k_per_segment,
        record_wall_time,
    } = config;
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!("tau {t} must be positive")));
    }
    let geo = geodesic_samples(rho0, rho1, *k_per_segment)?;
    let schedule = EpsilonSchedule::new(&geo, op)?;
    let w2sq = w2_squared(rho0, rho1)?;
    let pot = op.potential();
    let half_delta_f = 0.5 * (free_energy(rho1, pot)? - free_energy(rho0, pot)?);
    let results: Vec<Result<GammaSweepRecord>> = taus
        .par_iter()
        .map(|&tau| {
            let start = Instant::now();
            let idx = schedule.index(tau)?;
            let epsilon = idx.map_or(0.0, |i| schedule.eps[i]);
            let h_eps = idx.map_or(0.0, |i| schedule.h[i]);
            let rc = recovery_curve_with_eps(&geo, op, epsilon)?;
            let i_upper = finite_action(&rc.curve, op, tau)?;
            let w2sq_over_4tau = w2sq / (4.0 * tau);
            let gap = i_upper - w2sq_over_4tau;
            Ok(GammaSweepRecord {
                tau,
                epsilon,
                i_upper,
                i_lower_reference: w2sq_over_4tau + half_delta_f,
                w2sq_over_4tau,
                gap,
                half_delta_f,
                err: gap - half_delta_f,
                h_eps,
                tol_chain: curve_tol_chain(&rc.curve),
                seconds: if *record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (tau, r) in taus.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((*tau, e)),
        }
    }
    Ok(SweepOutcome { records, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnalyticPotential, Grid, Potential};
    use crate::semigroup::assemble_generator;
    use std::sync::Arc;

    fn op(n: usize, pot: AnalyticPotential) -> FPOperator {
        let g = Arc::new(Grid::new_1d(-6.0, 6.0, n).unwrap());
        let pot = Potential::sample(g.clone(), pot).unwrap();
        assemble_generator(&g, &pot).unwrap()
    }

    #[test]
    fn gibbs_endpoints_give_zero_gaps() {
        let op = op(64, AnalyticPotential::Quadratic { lambda: 1.0 });
        let gibbs = op.potential().gibbs_density();
        let mut cfg = GammaSweepConfig::new(gibbs.clone(), gibbs, op);
        cfg.k_per_segment = 8;
        let out = gamma_sweep(&cfg).unwrap();
        assert_eq!(out.records.len(), 4);
        for r in &out.records {
            assert_eq!(r.epsilon, 0.0);
            assert!(r.gap.abs() < 1e-20 && r.half_delta_f == 0.0 && r.seconds == 0.0);
        }
        let csv = out.to_csv();
        assert!(csv.starts_with("tau,epsilon,i_upper,w2sq_over_4tau,gap,half_delta_f,err,h_eps,seconds\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn out_of_range_tau_is_reported_not_fatal() {
        let op = op(64, AnalyticPotential::Quadratic { lambda: 1.0 });
        let g = op.grid().clone();
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.3).unwrap();
        let mut cfg = GammaSweepConfig::new(a, b, op);
        cfg.taus = vec![50.0, 0.1];
        cfg.k_per_segment = 8;
        let out = gamma_sweep(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert!(matches!(out.failures[0].1, Error::ScheduleOutOfRange { .. }));
    }

    #[test]
    fn double_well_gap_converges() {
        let op = op(128, AnalyticPotential::DoubleWell { a: 0.25, b: 0.5 });
        let g = op.grid().clone();
        let a = GridDensity::gaussian(g.clone(), &[-1.0], 0.2).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.8], 0.3).unwrap();
        let mut cfg = GammaSweepConfig::new(a, b, op);
        cfg.k_per_segment = 32;
        let out = gamma_sweep(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert!(out.violations(0.1).is_empty(), "{:?}", out.violations(0.1));
    }
}
