//! Minimizing movements `S_t[rho0] = argmin F(.) + W2^2(., rho0) / (2t)`.
//!
//! In 1D the step is a damped Newton-type descent on the simplex with the
//! exact `W2` between piecewise-constant densities and its first variation,
//! preconditioned by the Wasserstein metric `L_rho^+ / t`: the step solves
//! the banded system `(L_rho + diag(rho) / t) y = -rho ⊙ grad` and moves by
//! `L_rho y`, which is mass preserving. In 2D the step is the entropic
//! proximal scheme with an annealed regularization.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::functionals::free_energy;
use crate::grid::{weighted_laplacian, Grid, GridDensity, Potential};
use crate::linalg::{dot, BandedCholesky};
use crate::static_ot::{w2_entropic, w2_first_variation_1d, w2_squared};

/// Largest 2D grid for the dense entropic kernel.
pub const ENTROPIC_JKO_LIMIT: usize = 1024;

/// Start and end of the annealed regularization, in units of `h^2`.
pub const EPS_START_FACTOR: f64 = 1e-1;
pub const EPS_END_FACTOR: f64 = 1e-3;

/// Regularization of the debiased `W2` in the reported 2D objective, in units
/// of `h^2`; Sinkhorn stalls at the annealing floor.
pub const OBJECTIVE_EPS_FACTOR: f64 = 1e-1;

#[derive(Debug, Clone, Copy)]
pub struct JkoOptions {
    pub max_iter: usize,
    /// Stop when the Newton decrement falls below `tol * max(1, |J|)`.
    pub tol: f64,
    /// Entropic scheme: iterations per annealing stage.
    pub entropic_max_iter: usize,
    pub entropic_tol: f64,
}

impl Default for JkoOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-14,
            entropic_max_iter: 20_000,
            entropic_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JkoStepResult {
    pub minimizer: GridDensity,
    /// `J_t(minimizer | rho0)`.
    pub objective: f64,
    /// `W2^2 / (2t)`.
    pub w2_term: f64,
    /// `F(minimizer)`.
    pub entropy_term: f64,
    pub iterations: usize,
    /// Final Newton decrement (1D) or marginal residual (2D).
    pub residual: f64,
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step {t} must be positive")))
    }
}

fn w2sq(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if a.grid().dim() == 1 {
        w2_squared(a, b)
    } else {
        let eps = OBJECTIVE_EPS_FACTOR * a.grid().min_spacing().powi(2);
        Ok(w2_entropic(a, b, eps)?.distance_estimate.powi(2))
    }
}

/// `J_t(rho_bar | rho0) = F(rho_bar) - F(rho0) + W2^2(rho_bar, rho0) / (2t)`;
/// exact `W2` in 1D, debiased entropic in 2D.
pub fn jko_objective(rho_bar: &GridDensity, rho0: &GridDensity, pot: &Potential, t: f64) -> Result<f64> {
    check_t(t)?;
    if rho_bar == rho0 {
        return Ok(0.0);
    }
    Ok(free_energy(rho_bar, pot)? - free_energy(rho0, pot)? + w2sq(rho_bar, rho0)? / (2.0 * t))
}

pub fn jko_step(rho0: &GridDensity, pot: &Potential, t: f64) -> Result<JkoStepResult> {
    jko_step_with(rho0, pot, t, JkoOptions::default())
}

pub fn jko_step_with(rho0: &GridDensity, pot: &Potential, t: f64, opts: JkoOptions) -> Result<JkoStepResult> {
    check_t(t)?;
    rho0.grid().check(pot.grid(), "jko")?;
    if rho0.grid().dim() == 1 {
        newton_step(rho0, pot, t, opts)
    } else {
        entropic_step(rho0, pot, t, opts)
    }
}

/// `n`-fold composition of steps of size `t / n`.
pub fn jko_iterate(rho0: &GridDensity, pot: &Potential, t: f64, n: usize) -> Result<GridDensity> {
    Ok(jko_trajectory(rho0, pot, t, n)?.pop().expect("n >= 1").minimizer)
}

/// Every step of [`jko_iterate`].
pub fn jko_trajectory(rho0: &GridDensity, pot: &Potential, t: f64, n: usize) -> Result<Vec<JkoStepResult>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    check_t(t)?;
    let mut out: Vec<JkoStepResult> = Vec::with_capacity(n);
    for _ in 0..n {
        let start = out.last().map_or(rho0, |r| &r.minimizer);
        let next = jko_step(start, pot, t / n as f64)?;
        out.push(next);
    }
    Ok(out)
}

fn density(grid: &Arc<Grid>, m: Vec<f64>) -> GridDensity {
    GridDensity::from_parts_unchecked(grid.clone(), m)
}

fn newton_step(rho0: &GridDensity, pot: &Potential, t: f64, opts: JkoOptions) -> Result<JkoStepResult> {
    let grid = rho0.grid().clone();
    let n = grid.n_cells();
    let vol = grid.cell_volume();
    let f0 = free_energy(rho0, pot)?;
    let objective = |m: &GridDensity| -> Result<(f64, f64, f64)> {
        let f = free_energy(m, pot)?;
        let w = w2_squared(m, rho0)? / (2.0 * t);
        Ok((f - f0 + w, f, w))
    };
    // the entropy keeps the minimizer positive, so start inside
    let mut m: Vec<f64> = if rho0.masses().iter().all(|v| *v > 0.0) {
        rho0.masses().to_vec()
    } else {
        rho0.masses().iter().map(|v| (1.0 - 1e-3) * v + 1e-3 / n as f64).collect()
    };
    let mut cur = density(&grid, m.clone());
    let mut val = objective(&cur)?;
    let mut decrement = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let phi = w2_first_variation_1d(&cur, rho0)?;
        let g: Vec<f64> = (0..n)
            .map(|i| (m[i] / vol).ln() + 1.0 + pot.psi()[i] + phi[i] / (2.0 * t))
            .collect();
        let lap = weighted_laplacian(&cur);
        let bw = 1;
        let mut band = vec![0.0; n * (bw + 1)];
        for i in 0..n {
            band[i * 2 + 1] = m[i] / t;
        }
        for (e, w) in grid.edges().iter().zip(lap.weights()) {
            let (a, b) = (e.from.min(e.to), e.from.max(e.to));
            band[a * 2 + 1] += w;
            band[b * 2 + 1] += w;
            band[b * 2] -= w;
        }
        let rhs: Vec<f64> = m.iter().zip(&g).map(|(mi, gi)| -mi * gi).collect();
        let y = BandedCholesky::factor(n, bw, band)?.solve(&rhs);
        let delta = lap.apply(&y);
        decrement = -dot(&g, &delta);
        if !(decrement > opts.tol * val.0.abs().max(1.0)) {
            return finish(cur, val, iter, decrement.max(0.0));
        }
        let mut alpha: f64 = 1.0;
        for (mi, di) in m.iter().zip(&delta) {
            if *di < 0.0 {
                alpha = alpha.min(0.9 * mi / -di);
            }
        }
        loop {
            let trial: Vec<f64> = m.iter().zip(&delta).map(|(mi, di)| mi + alpha * di).collect();
            let total: f64 = trial.iter().sum();
            let cand = density(&grid, trial.iter().map(|v| v / total).collect());
            let cv = objective(&cand)?;
            if cv.0 <= val.0 - 1e-4 * alpha * decrement {
                m = cand.masses().to_vec();
                cur = cand;
                val = cv;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                // no measurable decrease left at this precision
                if decrement <= 1e-10 * val.0.abs().max(1.0) {
                    return finish(cur, val, iter, decrement);
                }
                return Err(Error::NonConvergence {
                    iterations: iter,
                    residual: decrement,
                    detail: "jko line search stalled".into(),
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: decrement,
        detail: "jko newton decrement".into(),
    })
}

fn finish(minimizer: GridDensity, val: (f64, f64, f64), iterations: usize, residual: f64) -> Result<JkoStepResult> {
    Ok(JkoStepResult {
        minimizer,
        objective: val.0,
        entropy_term: val.1,
        w2_term: val.2,
        iterations,
        residual,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain scaling for `min <C, pi> + eps H(pi) + 2t F(pi^T 1)` with
/// `pi 1 = rho0`; the second update is the KL proximal map of `2t F`.
fn entropic_step(rho0: &GridDensity, pot: &Potential, t: f64, opts: JkoOptions) -> Result<JkoStepResult> {
    let grid = rho0.grid().clone();
    let n = grid.n_cells();
    if n > ENTROPIC_JKO_LIMIT {
        return Err(Error::SizeLimit {
            cells: n,
            limit: ENTROPIC_JKO_LIMIT,
        });
    }
    let vol = grid.cell_volume();
    let centers = grid.cell_centers();
    let src: Vec<usize> = (0..n).filter(|&i| rho0.masses()[i] > 0.0).collect();
    let cost: Vec<f64> = src
        .iter()
        .flat_map(|&i| {
            let c = &centers;
            (0..n).map(move |j| (c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2))
        })
        .collect();
    let log_a: Vec<f64> = src.iter().map(|&i| rho0.masses()[i].ln()).collect();
    // log of vol e^{-1-psi}
    let log_w: Vec<f64> = pot.psi().iter().map(|p| vol.ln() - 1.0 - p).collect();
    let h2 = grid.min_spacing().powi(2);
    let mut eps = EPS_START_FACTOR * h2;
    let eps_end = EPS_END_FACTOR * h2;
    let mut f = vec![0.0; src.len()];
    let mut g = vec![0.0; n];
    let mut total_iter = 0;
    let mut residual = f64::INFINITY;
    let mut q = vec![0.0; n];
    loop {
        let theta = eps / (eps + 2.0 * t);
        let mut converged = false;
        for _ in 0..opts.entropic_max_iter {
            total_iter += 1;
            for (r, fi) in f.iter_mut().enumerate() {
                let row = &cost[r * n..(r + 1) * n];
                *fi = eps * log_a[r] - eps * log_sum_exp(row.iter().zip(&g).map(|(c, gj)| (gj - c) / eps));
            }
            let mut change: f64 = 0.0;
            for j in 0..n {
                let s = log_sum_exp((0..src.len()).map(|r| (f[r] - cost[r * n + j]) / eps));
                let log_q = theta * s + (1.0 - theta) * log_w[j];
                g[j] = eps * (log_q - s);
                let qj = log_q.exp();
                change += (qj - q[j]).abs();
                q[j] = qj;
            }
            residual = change;
            if change <= opts.entropic_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations: total_iter,
                residual,
                detail: format!("entropic jko at eps {eps:e}"),
            });
        }
        if eps <= eps_end {
            break;
        }
        // duals are in cost units and stay a warm start for the next stage
        eps = (eps * 0.5).max(eps_end);
    }
    let total: f64 = q.iter().sum();
    let minimizer = GridDensity::from_weights(grid.clone(), q.iter().map(|v| v / total).collect())?;
    let entropy_term = free_energy(&minimizer, pot)?;
    let w2_term = w2sq(&minimizer, rho0)? / (2.0 * t);
    Ok(JkoStepResult {
        objective: entropy_term - free_energy(rho0, pot)? + w2_term,
        minimizer,
        w2_term,
        entropy_term,
        iterations: total_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AnalyticPotential;
    use crate::semigroup::assemble_generator;

    fn setup(n: usize, lo: f64, hi: f64) -> (Arc<Grid>, Potential) {
        let g = Arc::new(Grid::new_1d(lo, hi, n).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        (g, pot)
    }

    #[test]
    fn objective_vanishes_at_the_start() {
        let (g, pot) = setup(64, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[1.0], 1.0).unwrap();
        assert_eq!(jko_objective(&a, &a, &pot, 0.5).unwrap(), 0.0);
        let gibbs = pot.gibbs_density();
        assert_eq!(jko_objective(&gibbs, &gibbs, &pot, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn objective_composes_free_energy_and_distance() {
        let (g, pot) = setup(128, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.3).unwrap();
        let expected = free_energy(&b, &pot).unwrap() - free_energy(&a, &pot).unwrap() + w2_squared(&b, &a).unwrap();
        assert!((jko_objective(&b, &a, &pot, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gibbs_is_a_fixed_point() {
        let (_, pot) = setup(64, -6.0, 6.0);
        let gibbs = pot.gibbs_density();
        let r = jko_step(&gibbs, &pot, 0.3).unwrap();
        assert!(r.minimizer.l1_distance(&gibbs) < 1e-12);
        assert!(r.objective.abs() < 1e-12);
        let it = jko_iterate(&gibbs, &pot, 0.5, 4).unwrap();
        assert!(it.l1_distance(&gibbs) < 1e-12);
    }

    #[test]
    fn step_parts_are_consistent_and_nonpositive() {
        let (g, pot) = setup(128, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[1.0], 1.0).unwrap();
        let r = jko_step(&a, &pot, 0.1).unwrap();
        let f0 = free_energy(&a, &pot).unwrap();
        assert!((r.objective - (r.entropy_term - f0 + r.w2_term)).abs() <= 1e-9);
        assert!(r.objective <= 0.0);
        assert!((r.objective - jko_objective(&r.minimizer, &a, &pot, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn small_step_follows_the_flow() {
        let (g, pot) = setup(256, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[1.0], 1.0).unwrap();
        let t = 0.05;
        let r = jko_step(&a, &pot, t).unwrap();
        let op = assemble_generator(&g, &pot).unwrap();
        let flow = op.evolve(&a, t).unwrap();
        // one implicit step of the gradient flow: mean e^{-t} up to O(t^2)
        assert!((r.minimizer.mean()[0] - (-t).exp()).abs() < 2.0 * t * t);
        assert!(r.minimizer.l1_distance(&flow) < 0.1 * t);
    }

    #[test]
    fn minimizer_beats_random_perturbations() {
        use rand::{Rng, SeedableRng};
        let (g, pot) = setup(64, -5.0, 5.0);
        let a = GridDensity::gaussian(g.clone(), &[-1.0], 0.6).unwrap();
        let t = 0.2;
        let r = jko_step(&a, &pot, t).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let w: Vec<f64> = r
                .minimizer
                .masses()
                .iter()
                .map(|m| m * (1.0 + 1e-3 * (rng.random::<f64>() - 0.5)))
                .collect();
            let p = GridDensity::from_weights(g.clone(), w).unwrap();
            assert!(r.objective <= jko_objective(&p, &a, &pot, t).unwrap() + 1e-14);
        }
    }

    #[test]
    fn iterates_decrease_energy() {
        let (g, pot) = setup(128, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let steps = jko_trajectory(&a, &pot, 0.5, 8).unwrap();
        let mut prev = a;
        for s in &steps {
            let lhs = free_energy(&s.minimizer, &pot).unwrap() + w2_squared(&prev, &s.minimizer).unwrap() / (2.0 * 0.5 / 8.0);
            assert!(lhs <= free_energy(&prev, &pot).unwrap() + 1e-8);
            prev = s.minimizer.clone();
        }
    }

    #[test]
    fn one_hot_start_spreads_out() {
        let (g, pot) = setup(32, -3.0, 3.0);
        let a = GridDensity::one_hot(g.clone(), 20).unwrap();
        let r = jko_step(&a, &pot, 0.1).unwrap();
        assert!(r.minimizer.masses().iter().all(|m| *m > 0.0));
        assert!(r.objective < 0.0);
    }

    #[test]
    fn entropic_step_in_2d_moves_towards_equilibrium() {
        let g = Arc::new(Grid::new_2d([-2.0, -2.0], [2.0, 2.0], [6, 6]).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        let a = GridDensity::gaussian(g.clone(), &[0.6, -0.3], 0.4).unwrap();
        let opts = JkoOptions::default();
        let r = jko_step_with(&a, &pot, 0.2, opts).unwrap();
        let s: f64 = r.minimizer.masses().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(free_energy(&r.minimizer, &pot).unwrap() < free_energy(&a, &pot).unwrap());
        let m = r.minimizer.mean();
        assert!(m[0].abs() < 0.6 && m[1].abs() < 0.3);
    }
}
