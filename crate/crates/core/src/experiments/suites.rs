//! Property suites shared by the command line runners and the acceptance tests.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamic_action::tol_chain;
use crate::error::{Error, Result};
use crate::functionals::{fisher_information_metric, free_energy, hm1_norm, hm1_norm_flux_form};
use crate::grid::{weighted_laplacian, AnalyticPotential, Grid, GridDensity, GridSignedMeasure, Potential};
use crate::jko::jko_iterate;
use crate::rate_ldp::EpsilonSchedule;
use crate::semigroup::FPOperator;
use crate::static_ot::{displacement_interpolation, w2_squared};

/// One named invariant evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const CHECKS_CSV_HEADER: &str = "check,value,threshold,pass";

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }

    /// A sequence that must decrease strictly; value is the largest ratio `next / prev`.
    pub fn decreasing(name: impl Into<String>, seq: &[f64]) -> Self {
        let worst = seq
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { f64::INFINITY })
            .fold(0.0, f64::max);
        Self {
            name: name.into(),
            value: worst,
            threshold: 1.0,
            pass: seq.windows(2).all(|w| w[1] < w[0]),
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{}", self.name, self.value, self.threshold, self.pass)
    }
}

pub fn checks_csv(checks: &[Check]) -> String {
    let mut out = String::from(CHECKS_CSV_HEADER);
    out.push('\n');
    for c in checks {
        out.push_str(&c.csv_row());
        out.push('\n');
    }
    out
}

/// Gaussians used by the semigroup suite, as `(mean per axis, variance)`.
const SUITE_GAUSSIANS: [(f64, f64); 2] = [(1.0, 1.0), (0.0, 0.25)];

#[derive(Debug, Clone)]
pub struct SemigroupSuiteConfig {
    pub times: Vec<f64>,
    /// Smoothing scales, decreasing; also the small-time sweep.
    pub eps_sweep: Vec<f64>,
    /// Steps per unit time of the dissipation check.
    pub dissipation_steps: Vec<usize>,
    pub dissipation_tau: f64,
}

impl Default for SemigroupSuiteConfig {
    fn default() -> Self {
        Self {
            times: vec![0.1, 0.25, 0.5, 1.0],
            eps_sweep: vec![0.1, 0.05, 0.025, 0.0125],
            dissipation_steps: vec![16, 64],
            dissipation_tau: 0.1,
        }
    }
}

fn gaussian(grid: &Arc<Grid>, m: f64, v: f64) -> Result<GridDensity> {
    GridDensity::gaussian(grid.clone(), &vec![m; grid.dim()], v)
}

/// Mass, positivity, equilibrium, moments, contraction, Fisher decay,
/// dissipation and smoothing properties of the semigroup, on the pair
/// `(rho0, rho1)` plus two fixed Gaussians.
pub fn semigroup_suite(op: &FPOperator, rho0: &GridDensity, rho1: &GridDensity, cfg: &SemigroupSuiteConfig) -> Result<Vec<Check>> {
    let grid = op.grid().clone();
    let pot = op.potential();
    let lambda = pot.lambda();
    let h = grid.min_spacing();
    let mut checks = Vec::new();
    let mut cases = vec![rho0.clone(), rho1.clone()];
    for (m, v) in SUITE_GAUSSIANS {
        cases.push(gaussian(&grid, m, v)?);
    }
    let gibbs = pot.gibbs_density();

    for &t in &cfg.times {
        for (c, rho) in cases.iter().enumerate() {
            let out = op.evolve(rho, t)?;
            let mass: f64 = out.masses().iter().sum();
            checks.push(Check::at_most(format!("mass/case={c}/t={t}"), (mass - 1.0).abs(), 1e-12));
            let min = out.masses().iter().copied().fold(f64::INFINITY, f64::min);
            checks.push(Check::at_least(format!("positivity/case={c}/t={t}"), min, 0.0));
            let f_drop = free_energy(&out, pot)? - free_energy(rho, pot)?;
            checks.push(Check::at_most(format!("entropy_monotone/case={c}/t={t}"), f_drop, 1e-10));
        }
        let g = op.evolve(&gibbs, t)?;
        let dev = g.masses().iter().zip(gibbs.masses()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        checks.push(Check::at_most(format!("gibbs_stationary/t={t}"), dev, 1e-10));

        let (a, b) = (op.evolve(rho0, t)?, op.evolve(rho1, t)?);
        let before = w2_squared(rho0, rho1)?.sqrt();
        let after = w2_squared(&a, &b)?.sqrt();
        checks.push(Check::at_most(
            format!("w2_contraction/t={t}"),
            after,
            (-lambda * t).exp() * before * (1.0 + 1e-2),
        ));
        for (c, rho) in cases.iter().enumerate() {
            let g0 = fisher_information_metric(rho, op)?;
            let gt = fisher_information_metric(&op.evolve(rho, t)?, op)?;
            if let (Some(g0), Some(gt)) = (g0.finite(), gt.finite()) {
                checks.push(Check::at_most(
                    format!("fisher_decay/case={c}/t={t}"),
                    gt,
                    (-2.0 * lambda * t).exp() * g0 * (1.0 + 2e-2),
                ));
            }
        }
    }

    if let Some(AnalyticPotential::Quadratic { lambda: l }) = pot.analytic() {
        // closed-form moments of the Ornstein-Uhlenbeck flow
        for ((m, v), t) in SUITE_GAUSSIANS.iter().zip([0.7, 0.5]) {
            let out = op.evolve(&gaussian(&grid, *m, *v)?, t)?;
            let em = m * (-l * t).exp();
            let ev = 1.0 / l + (v - 1.0 / l) * (-2.0 * l * t).exp();
            for k in 0..grid.dim() {
                checks.push(Check::at_most(format!("ou_mean/m0={m}/t={t}/axis={k}"), (out.mean()[k] - em).abs(), 5e-3));
                checks.push(Check::at_most(
                    format!("ou_variance/var0={v}/t={t}/axis={k}"),
                    (out.variance()[k] - ev).abs(),
                    5e-3,
                ));
            }
        }
    }

    // dF/dt = -||A rho||^2 along the discrete flow
    for &k in &cfg.dissipation_steps {
        let dt = cfg.dissipation_tau / k as f64;
        let traj = op.stepper(dt)?.trajectory(rho0, k)?;
        let mut worst: f64 = 0.0;
        for w in traj.windows(2) {
            let fisher = fisher_information_metric(&w[0].mix(&w[1], 0.5)?, op)?
                .finite()
                .ok_or_else(|| Error::InvalidArgument("infinite Fisher information along the flow".into()))?;
            let rate = (free_energy(&w[1], pot)? - free_energy(&w[0], pot)?) / dt;
            worst = worst.max((rate + fisher).abs());
        }
        checks.push(Check::at_most(format!("dissipation/steps={k}"), worst, tol_chain(dt, h)));
    }

    let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let geo = displacement_interpolation(rho0, rho1, &times)?;
    let mut uniform = Vec::new();
    let mut continuity = Vec::new();
    for &eps in &cfg.eps_sweep {
        let mut worst: f64 = 0.0;
        for rho in &geo.densities {
            worst = worst.max(free_energy(rho, pot)? - free_energy(&op.evolve(rho, eps)?, pot)?);
        }
        uniform.push(worst);
        continuity.push(w2_squared(&op.evolve(rho0, eps)?, rho0)?.sqrt());
    }
    checks.push(Check::decreasing("uniform_entropy_convergence", &uniform));
    checks.push(Check::decreasing("continuity_at_zero", &continuity));
    Ok(checks)
}

/// `min sum q_e^2 / w_e` subject to the cell balance, by a dense KKT solve in
/// edge variables. Pseudo-inverse handles the rank-deficient constraint.
pub fn qp_oracle_hm1(s: &GridSignedMeasure, rho: &GridDensity) -> Result<f64> {
    let grid = rho.grid();
    let (n, e) = (grid.n_cells(), grid.n_edges());
    if n > 64 {
        return Err(Error::SizeLimit { cells: n, limit: 64 });
    }
    let w = weighted_laplacian(rho).weights().to_vec();
    let live: Vec<usize> = (0..e).filter(|&k| w[k] > 0.0).collect();
    let m = live.len();
    let mut kkt = DMatrix::<f64>::zeros(m + n, m + n);
    for (r, &k) in live.iter().enumerate() {
        kkt[(r, r)] = 2.0 / w[k];
        let edge = grid.edges()[k];
        kkt[(m + edge.from, r)] = 1.0;
        kkt[(m + edge.to, r)] = -1.0;
        kkt[(r, m + edge.from)] = 1.0;
        kkt[(r, m + edge.to)] = -1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + n);
    for i in 0..n {
        rhs[m + i] = s.values()[i];
    }
    let sol = kkt
        .svd(true, true)
        .solve(&rhs, 1e-13)
        .map_err(|e| Error::LinearSolveFailure(e.to_string()))?;
    // the balance must be met exactly, otherwise s is not in the range
    for i in 0..n {
        let mut net = 0.0;
        for (r, &k) in live.iter().enumerate() {
            let edge = grid.edges()[k];
            if edge.from == i {
                net += sol[r];
            } else if edge.to == i {
                net -= sol[r];
            }
        }
        if (net - s.values()[i]).abs() > 1e-10 {
            return Err(Error::InfeasibleSupport {
                cell: i,
                imbalance: net - s.values()[i],
            });
        }
    }
    Ok(live.iter().enumerate().map(|(r, &k)| sol[r] * sol[r] / w[k]).sum())
}

#[derive(Debug, Clone)]
pub struct NormCheckConfig {
    pub instances: usize,
    pub max_cells: usize,
    pub oracle_instances: usize,
    pub oracle_max_cells: usize,
    pub tolerance: f64,
    pub oracle_tolerance: f64,
    pub seed: u64,
}

impl Default for NormCheckConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            max_cells: 64,
            oracle_instances: 40,
            oracle_max_cells: 8,
            tolerance: 1e-8,
            oracle_tolerance: 1e-9,
            seed: 0,
        }
    }
}

pub const NORM_CHECK_CSV_HEADER: &str = "instance,dim,cells,dual,flux,oracle,rel_diff";

#[derive(Debug, Clone)]
pub struct NormCheckReport {
    pub csv: String,
    pub checks: Vec<Check>,
    pub worst_dual_flux: f64,
    pub worst_oracle: f64,
}

fn random_instance(rng: &mut ChaCha8Rng, max_cells: usize) -> Result<(GridSignedMeasure, GridDensity)> {
    let grid = if max_cells >= 4 && rng.random::<bool>() {
        let nx = rng.random_range(2..=max_cells / 2);
        let ny = rng.random_range(2..=(max_cells / nx).max(2));
        Grid::new_2d([0.0, 0.0], [1.0, rng.random_range(0.5..2.0)], [nx, ny])?
    } else {
        Grid::new_1d(0.0, rng.random_range(0.5..2.0), rng.random_range(2..=max_cells.max(2)))?
    };
    let grid = Arc::new(grid);
    let n = grid.n_cells();
    let rho = GridDensity::from_weights(grid.clone(), (0..n).map(|_| rng.random_range(0.05..1.0)).collect())?;
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = s.iter().sum::<f64>() / n as f64;
    s.iter_mut().for_each(|v| *v -= mean);
    Ok((GridSignedMeasure::new(grid, s)?, rho))
}

/// Dual and flux forms of the weighted `H^-1` norm on random instances, and
/// both against the QP oracle on tiny grids.
pub fn norm_check_suite(cfg: &NormCheckConfig) -> Result<NormCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from(NORM_CHECK_CSV_HEADER);
    csv.push('\n');
    let (mut worst, mut worst_oracle): (f64, f64) = (0.0, 0.0);
    let total = cfg.instances + cfg.oracle_instances;
    for k in 0..total {
        let with_oracle = k >= cfg.instances;
        let (s, rho) = random_instance(&mut rng, if with_oracle { cfg.oracle_max_cells } else { cfg.max_cells })?;
        let dual = hm1_norm(&s, &rho)?.norm_sq;
        let flux = hm1_norm_flux_form(&s, &rho)?;
        let rel = (dual - flux).abs() / dual.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        let oracle = if with_oracle {
            let o = qp_oracle_hm1(&s, &rho)?;
            let scale = o.max(f64::MIN_POSITIVE);
            worst_oracle = worst_oracle.max((dual - o).abs() / scale).max((flux - o).abs() / scale);
            format!("{o:?}")
        } else {
            String::new()
        };
        let _ = writeln!(csv, "{k},{},{},{dual:?},{flux:?},{oracle},{rel:?}", s.grid().dim(), s.grid().n_cells());
    }
    let mut checks = vec![Check::at_most("dual_vs_flux", worst, cfg.tolerance)];
    if cfg.oracle_instances > 0 {
        checks.push(Check::at_most("qp_oracle", worst_oracle, cfg.oracle_tolerance));
    }
    Ok(NormCheckReport {
        csv,
        checks,
        worst_dual_flux: worst,
        worst_oracle,
    })
}

pub const JKO_ORDER_CSV_HEADER: &str = "n,l1_error,ratio,free_energy";

#[derive(Debug, Clone, PartialEq)]
pub struct JkoOrderRow {
    pub n: usize,
    pub l1_error: f64,
    /// Previous error over this one.
    pub ratio: Option<f64>,
    pub free_energy: f64,
}

/// L1 distance of `n` JKO steps of size `t / n` to the reference flow.
pub fn jko_order_sweep(rho0: &GridDensity, pot: &Potential, reference: &FPOperator, t: f64, steps: &[usize]) -> Result<Vec<JkoOrderRow>> {
    let target = reference.evolve(rho0, t)?;
    let mut rows: Vec<JkoOrderRow> = Vec::new();
    for &n in steps {
        let it = jko_iterate(rho0, pot, t, n)?;
        let l1_error = it.l1_distance(&target);
        rows.push(JkoOrderRow {
            n,
            l1_error,
            ratio: rows.last().map(|r| r.l1_error / l1_error),
            free_energy: free_energy(&it, pot)?,
        });
    }
    Ok(rows)
}

pub fn jko_order_csv(rows: &[JkoOrderRow]) -> String {
    let mut out = String::from(JKO_ORDER_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ratio = r.ratio.map_or(String::new(), |v| format!("{v:?}"));
        let _ = writeln!(out, "{},{:?},{},{:?}", r.n, r.l1_error, ratio, r.free_energy);
    }
    out
}

pub const SCHEDULE_CSV_HEADER: &str = "epsilon,h,g,eps_h";

pub fn schedule_csv(s: &EpsilonSchedule) -> String {
    let mut out = String::from(SCHEDULE_CSV_HEADER);
    out.push('\n');
    for i in 0..s.eps.len() {
        let _ = writeln!(out, "{:?},{:?},{:?},{:?}", s.eps[i], s.h[i], s.g(i), s.eps[i] * s.h[i]);
    }
    out
}

/// `eps(tau) / tau` and `tau h(eps(tau))` along the taus (largest first), and
/// `eps h(eps)` along the grid, must all decrease strictly.
pub fn schedule_checks(s: &EpsilonSchedule, taus: &[f64]) -> Result<Vec<Check>> {
    let mut ratio = Vec::new();
    let mut th = Vec::new();
    for &tau in taus {
        ratio.push(s.epsilon(tau)? / tau);
        th.push(tau * s.h_at(tau)?);
    }
    let eh: Vec<f64> = s.eps.iter().zip(&s.h).map(|(e, h)| e * h).collect();
    Ok(vec![
        Check::decreasing("schedule_eps_over_tau", &ratio),
        Check::decreasing("schedule_tau_h", &th),
        Check::decreasing("schedule_eps_h", &eh),
    ])
}
