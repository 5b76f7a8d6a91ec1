//! Quadratic-cost optimal transport between grid densities.
//!
//! In 1D a cell mass is read as uniform on its cell and the distance is the
//! exact `W2` between these piecewise-constant densities, computed from the
//! quantile functions. In 2D cells are point masses at their centers and the
//! distance is the exact value of the transportation linear program, solved
//! by network simplex up to [`EXACT_2D_LIMIT`] cells. [`w2_entropic`] is the
//! scalable approximation for either dimension.

pub(crate) mod network_simplex;
pub(crate) mod quantile;
pub(crate) mod sinkhorn;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use quantile::Line;

/// Largest 2D grid accepted by the exact solver.
pub const EXACT_2D_LIMIT: usize = 4096;

/// Marginal residual target of the entropic solver.
pub const SINKHORN_TOLERANCE: f64 = 1e-9;

/// Iteration cap of the entropic solver.
pub const SINKHORN_MAX_ITER: usize = 200_000;

/// A transport plan between the cells of two densities on the same grid.
#[derive(Debug, Clone)]
pub struct Coupling {
    n_source: usize,
    n_target: usize,
    /// `(source cell, target cell, mass)`, positive masses only.
    entries: Vec<(usize, usize, f64)>,
    pub row_residual: f64,
    pub col_residual: f64,
}

impl Coupling {
    pub(crate) fn from_entries(rho0: &GridDensity, rho1: &GridDensity, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut c = Coupling {
            n_source: rho0.len(),
            n_target: rho1.len(),
            entries,
            row_residual: 0.0,
            col_residual: 0.0,
        };
        let (rows, cols) = c.marginals();
        c.row_residual = rows.iter().zip(rho0.masses()).map(|(a, b)| (a - b).abs()).sum();
        c.col_residual = cols.iter().zip(rho1.masses()).map(|(a, b)| (a - b).abs()).sum();
        c
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; self.n_source];
        let mut cols = vec![0.0; self.n_target];
        for &(i, j, m) in &self.entries {
            rows[i] += m;
            cols[j] += m;
        }
        (rows, cols)
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_target]; self.n_source];
        for &(i, j, m) in &self.entries {
            out[i][j] += m;
        }
        out
    }

    /// `sum m |x_i - y_j|^2` between cell centers.
    pub fn cost(&self, grid: &Grid) -> f64 {
        self.entries.iter().map(|&(i, j, m)| m * center_cost(grid, i, j)).sum()
    }
}

/// Samples of a displacement interpolation.
#[derive(Debug, Clone)]
pub struct GeodesicCurve {
    pub times: Vec<f64>,
    pub densities: Vec<GridDensity>,
}

fn center_cost(grid: &Grid, i: usize, j: usize) -> f64 {
    let (x, y) = (grid.cell_center(i), grid.cell_center(j));
    (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)
}

fn line(rho: &GridDensity) -> Line<'_> {
    let g = rho.grid();
    Line {
        lower: g.lower()[0],
        h: g.spacing(0),
        masses: rho.masses(),
    }
}

fn support(rho: &GridDensity) -> Vec<usize> {
    (0..rho.len()).filter(|&i| rho.masses()[i] > 0.0).collect()
}

/// Squared distance only; cheaper than [`w2_exact`] in 1D.
pub fn w2_squared(rho0: &GridDensity, rho1: &GridDensity) -> Result<f64> {
    rho0.grid().check(rho1.grid(), "w2")?;
    if rho0.grid().dim() == 1 {
        let pieces = quantile::monotone_pieces(line(rho0), line(rho1));
        Ok(quantile::squared_distance(&pieces))
    } else {
        let (d, _) = w2_exact(rho0, rho1)?;
        Ok(d * d)
    }
}

/// Exact `W2` and an optimal coupling.
pub fn w2_exact(rho0: &GridDensity, rho1: &GridDensity) -> Result<(f64, Coupling)> {
    rho0.grid().check(rho1.grid(), "w2")?;
    let grid = rho0.grid();
    if grid.dim() == 1 {
        let pieces = quantile::monotone_pieces(line(rho0), line(rho1));
        let d2 = quantile::squared_distance(&pieces);
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(pieces.len());
        for p in &pieces {
            match entries.last_mut() {
                Some(last) if last.0 == p.i && last.1 == p.j => last.2 += p.du,
                _ => entries.push((p.i, p.j, p.du)),
            }
        }
        return Ok((d2.max(0.0).sqrt(), Coupling::from_entries(rho0, rho1, entries)));
    }
    if grid.n_cells() > EXACT_2D_LIMIT {
        return Err(Error::SizeLimit {
            cells: grid.n_cells(),
            limit: EXACT_2D_LIMIT,
        });
    }
    let s0 = support(rho0);
    let s1 = support(rho1);
    let a: Vec<f64> = s0.iter().map(|&i| rho0.masses()[i]).collect();
    let b: Vec<f64> = s1.iter().map(|&j| rho1.masses()[j]).collect();
    let max_pivots = 50 * (s0.len() + s1.len()).pow(2).max(1000);
    let sol = network_simplex::solve(&a, &b, |i, j| center_cost(grid, s0[i], s1[j]), max_pivots)?;
    let entries = sol.flows.iter().map(|&(i, j, m)| (s0[i], s1[j], m)).collect();
    Ok((sol.cost.max(0.0).sqrt(), Coupling::from_entries(rho0, rho1, entries)))
}

/// Entropic estimate of `W2`.
#[derive(Debug, Clone)]
pub struct EntropicResult {
    /// Square root of the debiased divergence, or of the transport cost of
    /// the entropic plan when not debiased.
    pub distance_estimate: f64,
    pub coupling: Coupling,
    /// `<C, pi>` of the entropic plan.
    pub transport_cost: f64,
    /// `OT_eps(a, b)`, including the entropy term.
    pub entropic_value: f64,
    pub iterations: usize,
}

/// Options of the entropic solver.
#[derive(Debug, Clone, Copy)]
pub struct EntropicOptions {
    pub debias: bool,
    pub eps_scaling: bool,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        Self {
            debias: true,
            eps_scaling: true,
            tolerance: SINKHORN_TOLERANCE,
            max_iter: SINKHORN_MAX_ITER,
        }
    }
}

/// Debiased log-domain Sinkhorn with default options.
pub fn w2_entropic(rho0: &GridDensity, rho1: &GridDensity, eps: f64) -> Result<EntropicResult> {
    w2_entropic_with(rho0, rho1, eps, EntropicOptions::default())
}

pub(crate) struct SupportProblem {
    pub s0: Vec<usize>,
    pub s1: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub cost: Vec<f64>,
}

pub(crate) fn support_problem(rho0: &GridDensity, rho1: &GridDensity) -> SupportProblem {
    let grid = rho0.grid();
    let s0 = support(rho0);
    let s1 = support(rho1);
    let a = s0.iter().map(|&i| rho0.masses()[i]).collect();
    let b = s1.iter().map(|&j| rho1.masses()[j]).collect();
    let mut cost = Vec::with_capacity(s0.len() * s1.len());
    for &i in &s0 {
        for &j in &s1 {
            cost.push(center_cost(grid, i, j));
        }
    }
    SupportProblem { s0, s1, a, b, cost }
}

pub fn w2_entropic_with(rho0: &GridDensity, rho1: &GridDensity, eps: f64, opts: EntropicOptions) -> Result<EntropicResult> {
    rho0.grid().check(rho1.grid(), "w2 entropic")?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let p = support_problem(rho0, rho1);
    let sol = sinkhorn::entropic(&p.a, &p.b, &p.cost, eps, opts.eps_scaling, opts.tolerance, opts.max_iter)?;
    let m = p.s1.len();
    let entries = sol
        .plan
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(k, v)| (p.s0[k / m], p.s1[k % m], *v))
        .collect();
    let coupling = Coupling::from_entries(rho0, rho1, entries);
    let mut iterations = sol.iterations;
    let distance_sq = if opts.debias {
        let self_value = |rho: &GridDensity| -> Result<(f64, usize)> {
            let q = support_problem(rho, rho);
            let s = sinkhorn::entropic(&q.a, &q.b, &q.cost, eps, opts.eps_scaling, opts.tolerance, opts.max_iter)?;
            Ok((s.value, s.iterations))
        };
        let (v0, i0) = self_value(rho0)?;
        let (v1, i1) = self_value(rho1)?;
        iterations += i0 + i1;
        sol.value - 0.5 * (v0 + v1)
    } else {
        sol.transport_cost
    };
    Ok(EntropicResult {
        distance_estimate: distance_sq.max(0.0).sqrt(),
        coupling,
        transport_cost: sol.transport_cost,
        entropic_value: sol.value,
        iterations,
    })
}

/// McCann interpolation between `rho0` and `rho1` at the given times.
pub fn displacement_interpolation(rho0: &GridDensity, rho1: &GridDensity, times: &[f64]) -> Result<GeodesicCurve> {
    rho0.grid().check(rho1.grid(), "interpolation")?;
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("times must be sorted".into()));
    }
    let grid = rho0.grid().clone();
    let densities = if grid.dim() == 1 {
        let pieces = quantile::monotone_pieces(line(rho0), line(rho1));
        times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    rho0.clone()
                } else if t == 1.0 {
                    rho1.clone()
                } else {
                    let m = quantile::interpolate(&pieces, grid.lower()[0], grid.spacing(0), grid.n_cells(), t);
                    normalized(&grid, m)
                }
            })
            .collect()
    } else {
        let (_, coupling) = w2_exact(rho0, rho1)?;
        times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    rho0.clone()
                } else if t == 1.0 {
                    rho1.clone()
                } else {
                    normalized(&grid, splat(&grid, &coupling, t))
                }
            })
            .collect()
    };
    Ok(GeodesicCurve {
        times: times.to_vec(),
        densities,
    })
}

fn normalized(grid: &Arc<Grid>, mut m: Vec<f64>) -> GridDensity {
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v = (*v / total).max(0.0));
    GridDensity::from_parts_unchecked(grid.clone(), m)
}

/// Moves each coupling atom to `(1 - t) x + t y` and splits it bilinearly
/// among the surrounding cell centers.
fn splat(grid: &Grid, coupling: &Coupling, t: f64) -> Vec<f64> {
    let n = grid.cells_per_axis().to_vec();
    let mut out = vec![0.0; grid.n_cells()];
    for &(i, j, m) in coupling.entries() {
        let (x, y) = (grid.cell_center(i), grid.cell_center(j));
        let mut lo = [0usize; 2];
        let mut frac = [0.0; 2];
        for k in 0..2 {
            let p = (1.0 - t) * x[k] + t * y[k];
            // continuous cell coordinate of the point relative to centers
            let s = ((p - grid.lower()[k]) / grid.spacing(k) - 0.5).clamp(0.0, (n[k] - 1) as f64);
            let base = (s.floor() as usize).min(n[k] - 2);
            lo[k] = base;
            frac[k] = s - base as f64;
        }
        for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                let w = wx * wy;
                if w > 0.0 {
                    out[grid.cell_index(&[lo[0] + dx, lo[1] + dy])] += m * w;
                }
            }
        }
    }
    out
}

/// Cell averages of the Kantorovich potential of `rho` towards `target`
/// (1D only): the first variation of `W2^2(., target)` at `rho`.
pub fn w2_first_variation_1d(rho: &GridDensity, target: &GridDensity) -> Result<Vec<f64>> {
    rho.grid().check(target.grid(), "first variation")?;
    if rho.grid().dim() != 1 {
        return Err(Error::InvalidArgument("first variation is implemented in 1D".into()));
    }
    let pieces = quantile::monotone_pieces(line(rho), line(target));
    Ok(quantile::source_potential(line(rho), &pieces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::free_energy;
    use crate::grid::{AnalyticPotential, Potential};
    use proptest::prelude::*;

    fn g1(n: usize, lo: f64, hi: f64) -> Arc<Grid> {
        Arc::new(Grid::new_1d(lo, hi, n).unwrap())
    }

    #[test]
    fn identical_densities() {
        let g = g1(64, -3.0, 3.0);
        let rho = GridDensity::gaussian(g, &[0.2], 0.5).unwrap();
        let (d, c) = w2_exact(&rho, &rho).unwrap();
        assert!(d < 1e-12);
        assert!(c.entries().iter().all(|(i, j, _)| i == j));
    }

    #[test]
    fn two_diracs() {
        let g = g1(20, 0.0, 10.0);
        let a = GridDensity::one_hot(g.clone(), 3).unwrap();
        let b = GridDensity::one_hot(g.clone(), 15).unwrap();
        let (d, _) = w2_exact(&a, &b).unwrap();
        assert!((d - 6.0).abs() < 1e-12);
        let g2 = Arc::new(Grid::new_2d([0.0, 0.0], [4.0, 4.0], [4, 4]).unwrap());
        let a = GridDensity::one_hot(g2.clone(), 0).unwrap();
        let b = GridDensity::one_hot(g2.clone(), 15).unwrap();
        let (d, _) = w2_exact(&a, &b).unwrap();
        assert!((d - 18.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_pair_closed_form() {
        let g = g1(512, -8.0, 8.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 1.0).unwrap();
        let b = GridDensity::gaussian(g, &[1.0], 1.0).unwrap();
        let (d, c) = w2_exact(&a, &b).unwrap();
        assert!((d * d - 1.0).abs() < 5e-3);
        assert!(c.row_residual < 1e-12 && c.col_residual < 1e-12);
    }

    #[test]
    fn network_simplex_matches_1d_monotone_on_a_strip() {
        // a 2D grid of height 2 with mass on the bottom row behaves like 1D atoms
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [6.0, 2.0], [6, 2]).unwrap());
        let a = GridDensity::new(g.clone(), vec![0.1, 0.3, 0.2, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = GridDensity::new(g.clone(), vec![0.0, 0.25, 0.25, 0.25, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (d, c) = w2_exact(&a, &b).unwrap();
        // atomic monotone coupling
        let xa: [(f64, f64); 4] = [(0.5, 0.1), (1.5, 0.3), (2.5, 0.2), (4.5, 0.4)];
        let xb: [(f64, f64); 4] = [(1.5, 0.25), (2.5, 0.25), (3.5, 0.25), (5.5, 0.25)];
        let (mut i, mut j, mut ra, mut rb, mut total) = (0, 0, xa[0].1, xb[0].1, 0.0);
        while i < 4 && j < 4 {
            let m: f64 = ra.min(rb);
            total += m * (xa[i].0 - xb[j].0).powi(2);
            ra -= m;
            rb -= m;
            if ra <= 1e-15 {
                i += 1;
                ra = if i < 4 { xa[i].1 } else { 0.0 };
            }
            if rb <= 1e-15 {
                j += 1;
                rb = if j < 4 { xb[j].1 } else { 0.0 };
            }
        }
        assert!((d * d - total).abs() < 1e-12);
        assert!(c.row_residual < 1e-12 && c.col_residual < 1e-12);
    }

    #[test]
    fn exact_2d_size_limit() {
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 1.0], [65, 64]).unwrap());
        let a = GridDensity::uniform(g);
        assert!(matches!(w2_exact(&a, &a), Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn entropic_identical_debiased() {
        let g = g1(64, -4.0, 4.0);
        let a = GridDensity::gaussian(g, &[0.0], 1.0).unwrap();
        let r = w2_entropic(&a, &a, 1e-2).unwrap();
        assert!(r.distance_estimate <= 1e-4);
        assert!(r.coupling.row_residual <= 1e-8 && r.coupling.col_residual <= 1e-8);
    }

    #[test]
    fn entropic_sweep_approaches_exact() {
        let g = g1(512, -8.0, 8.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 1.0).unwrap();
        let b = GridDensity::gaussian(g, &[1.0], 1.0).unwrap();
        let exact = w2_squared(&a, &b).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let r = w2_entropic(&a, &b, eps).unwrap();
            let err = (r.distance_estimate.powi(2) - exact).abs();
            assert!(err < last, "eps {eps}: {err} !< {last}");
            last = err;
            if eps == 1e-3 {
                assert!(err < 1e-2 * exact);
            }
        }
    }

    #[test]
    fn interpolation_endpoints_and_diracs() {
        let g = g1(21, 0.0, 21.0);
        let a = GridDensity::one_hot(g.clone(), 4).unwrap();
        let b = GridDensity::one_hot(g.clone(), 14).unwrap();
        let c = displacement_interpolation(&a, &b, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(c.densities[0], a);
        assert_eq!(c.densities[2], b);
        assert!((c.densities[1].masses()[9] - 1.0).abs() < 1e-12);
        // even distance: split across two cells
        let b = GridDensity::one_hot(g, 13).unwrap();
        let c = displacement_interpolation(&a, &b, &[0.5]).unwrap();
        let m = c.densities[0].masses();
        assert!((m[8] - 0.5).abs() < 1e-12 && (m[9] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_geodesic_midpoint() {
        let g = g1(512, -8.0, 8.0);
        let a = GridDensity::gaussian(g.clone(), &[0.0], 1.0).unwrap();
        let b = GridDensity::gaussian(g, &[1.0], 1.0).unwrap();
        let c = displacement_interpolation(&a, &b, &[0.5]).unwrap();
        let mid = &c.densities[0];
        assert!((mid.mean()[0] - 0.5).abs() < 1e-3);
        assert!((mid.variance_piecewise()[0] - 1.0).abs() < 5e-3);
    }

    #[test]
    fn constant_speed_1d() {
        let g = g1(256, -6.0, 6.0);
        let a = GridDensity::gaussian(g.clone(), &[-1.0], 0.4).unwrap();
        let b = GridDensity::gaussian(g, &[1.5], 1.2).unwrap();
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        let c = displacement_interpolation(&a, &b, &times).unwrap();
        let total = w2_squared(&a, &b).unwrap().sqrt();
        for s in 0..5 {
            for t in (s + 1)..5 {
                let d = w2_squared(&c.densities[s], &c.densities[t]).unwrap().sqrt();
                let expected = (times[t] - times[s]) * total;
                assert!((d - expected).abs() <= 1e-2 * total, "{s} {t}: {d} vs {expected}");
            }
        }
    }

    #[test]
    fn interpolation_2d_moves_mass() {
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [8.0, 8.0], [8, 8]).unwrap());
        let a = GridDensity::one_hot(g.clone(), g.cell_index(&[1, 1])).unwrap();
        let b = GridDensity::one_hot(g.clone(), g.cell_index(&[5, 3])).unwrap();
        let c = displacement_interpolation(&a, &b, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(c.densities[0], a);
        assert_eq!(c.densities[2], b);
        assert!((c.densities[1].masses()[g.cell_index(&[3, 2])] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn displacement_convexity_of_free_energy() {
        let g = g1(256, -8.0, 8.0);
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        for ((m0, v0), (m1, v1)) in [((0.0, 0.5), (0.5, 0.3)), ((-1.0, 1.0), (1.0, 2.0))] {
            let a = GridDensity::gaussian(g.clone(), &[m0], v0).unwrap();
            let b = GridDensity::gaussian(g.clone(), &[m1], v1).unwrap();
            let w2 = w2_squared(&a, &b).unwrap();
            let (fa, fb) = (free_energy(&a, &pot).unwrap(), free_energy(&b, &pot).unwrap());
            let ts: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
            let c = displacement_interpolation(&a, &b, &ts).unwrap();
            for (t, rho) in ts.iter().zip(&c.densities) {
                let bound = (1.0 - t) * fa + t * fb - 0.5 * t * (1.0 - t) * w2;
                assert!(free_energy(rho, &pot).unwrap() <= bound + 5e-3);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn triangle_inequality_1d(
            a in proptest::collection::vec(0.0f64..1.0, 24),
            b in proptest::collection::vec(0.0f64..1.0, 24),
            c in proptest::collection::vec(0.0f64..1.0, 24),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 0.1 && b.iter().sum::<f64>() > 0.1 && c.iter().sum::<f64>() > 0.1);
            let g = g1(24, -2.0, 2.0);
            let a = GridDensity::from_weights(g.clone(), a).unwrap();
            let b = GridDensity::from_weights(g.clone(), b).unwrap();
            let c = GridDensity::from_weights(g, c).unwrap();
            let ab = w2_exact(&a, &b).unwrap().0;
            let bc = w2_exact(&b, &c).unwrap().0;
            let ac = w2_exact(&a, &c).unwrap().0;
            prop_assert!(ac <= ab + bc + 1e-10);
        }

        #[test]
        fn coupling_marginals_2d(
            a in proptest::collection::vec(0.0f64..1.0, 25),
            b in proptest::collection::vec(0.0f64..1.0, 25),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 0.1 && b.iter().sum::<f64>() > 0.1);
            let g = Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 1.0], [5, 5]).unwrap());
            let a = GridDensity::from_weights(g.clone(), a).unwrap();
            let b = GridDensity::from_weights(g.clone(), b).unwrap();
            let (d, c) = w2_exact(&a, &b).unwrap();
            prop_assert!(c.row_residual <= 1e-8 && c.col_residual <= 1e-8);
            prop_assert!(c.entries().iter().all(|e| e.2 >= 0.0));
            prop_assert!((c.cost(&g) - d * d).abs() < 1e-12);
            // LP optimum is no worse than the entropic plan's cost
            let e = w2_entropic_with(&a, &b, 1e-2, EntropicOptions { debias: false, ..Default::default() }).unwrap();
            prop_assert!(d * d <= e.transport_cost + 1e-10);
        }
    }
}
