//! Small-instance minimizer of the controlled action.
//!
//! Unknowns are the interior densities `rho_1..rho_{K-1}`, one momentum
//! `m_k` and one edge density `theta_k` per step. The objective is
//! `sum c m^2 / theta` with `c = dt vol / (4 tau)`, subject to
//!
//! ```text
//! rho_{k+1} - rho_k + dt div m_k - dt tau A (rho_k + rho_{k+1}) / 2 = 0
//! theta_k - T (rho_k + rho_{k+1}) / 2 = 0
//! ```
//!
//! with `T` the edge average. Diagonally preconditioned Chambolle-Pock
//! iterations handle the perspective function through its conjugate, the
//! indicator of a parabola.
//!
//! The default method eliminates the momenta and runs a barrier Newton
//! method on the interior densities; the primal-dual iterations remain
//! available.
//!
//! The stopping test is a certified gap. Any positive curve is feasible
//! once its momenta are solved exactly, so the controlled action of the
//! current densities bounds the optimum from above. Adding the redundant
//! constraint that interior slices have unit mass makes the Lagrangian
//! dual finite for every continuity multiplier, which bounds it from below.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::semigroup::FPOperator;

use super::reduced::Reduced;
use super::{controlled_action, kinetic_action, optimal_momenta, DiscreteCurve};
use crate::static_ot::displacement_interpolation;

/// Largest instance accepted by the minimizer.
pub const MAX_CELLS: usize = 64;
pub const MAX_STEPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Log-barrier Newton on the reduced primal (momenta eliminated),
    /// certified by the dual bound at the multipliers `f_k / (2 tau)`.
    Barrier,
    /// Preconditioned Chambolle-Pock on the full primal-dual problem.
    PrimalDual,
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Stop once `upper - lower <= gap_tol * max(1, |upper|)`.
    pub gap_tol: f64,
    pub check_every: usize,
    /// Fail with [`Error::NonConvergence`] when the gap test is not met.
    pub require_gap: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            method: Method::Barrier,
            max_iter: 20_000,
            gap_tol: 1e-7,
            check_every: 50,
            require_gap: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlledMinimum {
    /// Controlled action of `curve`, an upper bound for the minimum.
    pub value: f64,
    /// Dual lower bound for the minimum.
    pub lower_bound: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub curve: DiscreteCurve,
}

/// Minimizes the controlled action over curves with `k` uniform steps.
pub fn minimize_controlled_action(
    rho0: &GridDensity,
    rho1: &GridDensity,
    op: &FPOperator,
    tau: f64,
    k: usize,
) -> Result<ControlledMinimum> {
    minimize_controlled_action_with(rho0, rho1, Some(op), tau, k, MinimizeOptions::default())
}

/// Minimizes the kinetic action (no drift, `tau = 1/4`).
pub fn minimize_kinetic_action(rho0: &GridDensity, rho1: &GridDensity, k: usize) -> Result<ControlledMinimum> {
    minimize_controlled_action_with(rho0, rho1, None, 0.25, k, MinimizeOptions::default())
}

/// With `op = None` the drift is switched off and the value is the kinetic
/// action divided by `4 tau`.
pub fn minimize_controlled_action_with(
    rho0: &GridDensity,
    rho1: &GridDensity,
    op: Option<&FPOperator>,
    tau: f64,
    k: usize,
    opts: MinimizeOptions,
) -> Result<ControlledMinimum> {
    rho0.grid().check(rho1.grid(), "minimizer")?;
    let grid = rho0.grid().clone();
    if let Some(op) = op {
        grid.check(op.grid(), "minimizer")?;
    }
    if grid.n_cells() > MAX_CELLS {
        return Err(Error::SizeLimit {
            cells: grid.n_cells(),
            limit: MAX_CELLS,
        });
    }
    if k == 0 || k > MAX_STEPS {
        return Err(Error::InvalidArgument(format!("step count {k} outside 1..={MAX_STEPS}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
    }
    let problem = Problem::new(&grid, rho0.masses(), rho1.masses(), op, tau, k);
    let evaluate = |rho: &[f64]| -> Result<Option<(f64, DiscreteCurve)>> {
        let curve = problem.curve(rho)?;
        let v = match op {
            Some(op) => controlled_action(&curve, op, tau)?.finite(),
            None => kinetic_action(&curve)?.finite().map(|v| v / (4.0 * tau)),
        };
        Ok(v.map(|v| (v, curve)))
    };

    // start from the displacement interpolation with exact momenta
    let times: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let geo = displacement_interpolation(rho0, rho1, &times)?;
    let mut x = vec![0.0; problem.n_cols];
    for j in 1..k {
        x[problem.rho_col(j, 0)..problem.rho_col(j, 0) + problem.n]
            .copy_from_slice(geo.densities[j].masses());
    }
    let start = DiscreteCurve::new(times, geo.densities)?;
    if let Ok((m, _)) = optimal_momenta(&start, op, tau) {
        for (s, field) in m.iter().enumerate() {
            for (e, v) in field.values().iter().enumerate() {
                x[problem.m_col(s, e)] = *v;
            }
        }
    }
    for s in 0..k {
        for e in 0..problem.ne {
            x[problem.th_col(s, e)] = problem.theta_of(&x, s, e);
        }
    }

    let mut best: Option<(f64, DiscreteCurve)> = evaluate(&problem.rho_part(&x))?;
    let mut lower = f64::NEG_INFINITY;
    if opts.method == Method::Barrier {
        let reduced = Reduced {
            grid: grid.clone(),
            k,
            tau,
            a: op.map(|op| op.dense()),
            rho0: rho0.masses().to_vec(),
            rho1: rho1.masses().to_vec(),
        };
        let n = grid.n_cells();
        // strictly positive start
        let mut interior: Vec<Vec<f64>> = start.densities()[1..k]
            .iter()
            .map(|d| d.masses().iter().map(|m| (1.0 - 1e-9) * m + 1e-9 / n as f64).collect())
            .collect();
        let scale = best.as_ref().map_or(1.0, |(v, _)| v.abs().max(1e-6));
        let count = ((k - 1) * n).max(1) as f64;
        let mut mu = 1e-2 * scale / count;
        let mut iterations = 0;
        let mut converged = false;
        let mut stalled = 0;
        while iterations < opts.max_iter {
            match reduced.barrier_stage(&mut interior, mu, opts.max_iter - iterations) {
                Ok(steps) => iterations += steps,
                // ill-conditioned Hessian at tiny mu: keep the best bounds so far
                Err(Error::LinearSolveFailure(_)) => break,
                Err(e) => return Err(e),
            }
            let ev = reduced.evaluate(&interior, false)?;
            let mut y = vec![0.0; problem.n_rows];
            for (s, f) in ev.potentials.iter().enumerate() {
                for (i, v) in f.iter().enumerate() {
                    y[s * problem.n + i] = v / (2.0 * tau);
                }
            }
            let bound = problem.dual_bound(&y);
            if bound > lower {
                lower = bound;
                stalled = 0;
            } else {
                stalled += 1;
            }
            if let Some((v, curve)) = evaluate(&interior.concat())? {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, curve));
                }
            }
            if let Some((v, _)) = &best {
                if v - lower <= opts.gap_tol * v.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            // the certificate degrades once tail cells lose precision
            if stalled >= 2 || mu * count < 1e-3 * opts.gap_tol * scale {
                break;
            }
            mu *= 0.1;
        }
        return finish(best, lower, iterations, converged, op, tau, opts);
    }
    let mut y = vec![0.0; problem.n_rows];
    let mut xbar = x.clone();
    let mut kx = vec![0.0; problem.n_rows];
    let mut kty = vec![0.0; problem.n_cols];
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=opts.max_iter {
        iterations = it;
        problem.apply(&xbar, &mut kx);
        for r in 0..problem.n_rows {
            y[r] += problem.sigma[r] * (kx[r] - problem.b[r]);
        }
        problem.apply_transpose(&y, &mut kty);
        let x_old = x.clone();
        for c in 0..problem.n_cols {
            x[c] -= problem.step[c] * kty[c];
        }
        problem.prox(&mut x);
        for c in 0..problem.n_cols {
            xbar[c] = 2.0 * x[c] - x_old[c];
        }
        if it % opts.check_every == 0 || it == opts.max_iter {
            lower = lower.max(problem.dual_bound(&y));
            if let Some((v, curve)) = evaluate(&problem.rho_part(&x))? {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, curve));
                }
            }
            if let Some((v, _)) = &best {
                if v - lower <= opts.gap_tol * v.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
        }
    }
    finish(best, lower, iterations, converged, op, tau, opts)
}

fn finish(
    best: Option<(f64, DiscreteCurve)>,
    lower: f64,
    iterations: usize,
    converged: bool,
    op: Option<&FPOperator>,
    tau: f64,
    opts: MinimizeOptions,
) -> Result<ControlledMinimum> {
    let (value, curve) = best.ok_or_else(|| Error::NonConvergence {
        iterations,
        residual: f64::INFINITY,
        detail: "no curve with finite action".into(),
    })?;
    let gap = value - lower;
    if opts.require_gap && !converged {
        return Err(Error::NonConvergence {
            iterations,
            residual: gap,
            detail: format!("duality gap: upper {value}, lower {lower}"),
        });
    }
    let (m, src) = optimal_momenta(&curve, op, tau)?;
    let curve = curve.with_momenta(m, Some(&src))?;
    Ok(ControlledMinimum {
        value,
        lower_bound: lower,
        gap,
        iterations,
        converged,
        curve,
    })
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone)]
struct Csr {
    start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, mut t: Vec<(usize, usize, f64)>) -> Csr {
        t.sort_by_key(|a| (a.0, a.1));
        let mut start = vec![0; rows + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = (usize::MAX, usize::MAX);
        for (r, c, v) in t {
            if (r, c) == last {
                *val.last_mut().expect("repeated entry") += v;
                continue;
            }
            last = (r, c);
            start[r + 1] += 1;
            col.push(c);
            val.push(v);
        }
        for r in 0..rows {
            start[r + 1] += start[r];
        }
        Csr { start, col, val }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (self.start[r]..self.start[r + 1]).map(|p| self.val[p] * x[self.col[p]]).sum();
        }
    }

    fn abs_row_sums(&self) -> Vec<f64> {
        (0..self.start.len() - 1)
            .map(|r| (self.start[r]..self.start[r + 1]).map(|p| self.val[p].abs()).sum())
            .collect()
    }
}

struct Problem {
    grid: Arc<Grid>,
    n: usize,
    ne: usize,
    k: usize,
    n_rows: usize,
    n_cols: usize,
    /// `c` of the perspective term
    weight: f64,
    kmat: Csr,
    kt: Csr,
    b: Vec<f64>,
    sigma: Vec<f64>,
    step: Vec<f64>,
    edges: Vec<(usize, usize)>,
    inv_2vol: f64,
    rho0: Vec<f64>,
    rho1: Vec<f64>,
}

impl Problem {
    fn new(grid: &Arc<Grid>, rho0: &[f64], rho1: &[f64], op: Option<&FPOperator>, tau: f64, k: usize) -> Problem {
        let n = grid.n_cells();
        let ne = grid.n_edges();
        let dt = 1.0 / k as f64;
        let vol = grid.cell_volume();
        let n_rows = k * n + k * ne;
        let n_cols = (k - 1) * n + 2 * k * ne;
        let edges: Vec<(usize, usize)> = grid.edges().iter().map(|e| (e.from, e.to)).collect();
        let a = op.map(|op| op.dense());
        let mut p = Problem {
            grid: grid.clone(),
            n,
            ne,
            k,
            n_rows,
            n_cols,
            weight: dt * vol / (4.0 * tau),
            kmat: Csr::from_triplets(0, Vec::new()),
            kt: Csr::from_triplets(0, Vec::new()),
            b: vec![0.0; n_rows],
            sigma: Vec::new(),
            step: Vec::new(),
            edges,
            inv_2vol: 0.5 / vol,
            rho0: rho0.to_vec(),
            rho1: rho1.to_vec(),
        };
        let mut t: Vec<(usize, usize, f64)> = Vec::new();
        let half = 0.5 * dt * tau;
        for s in 0..k {
            // density j enters slice s as rho_k (j = s, sign -1) and rho_{k+1} (j = s + 1, sign +1)
            for (j, sign) in [(s, -1.0), (s + 1, 1.0)] {
                // coefficient block on density j in the continuity rows: sign I - half A
                let mut block: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, sign)).collect();
                if let Some(a) = &a {
                    for (r, row) in a.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            if *v != 0.0 {
                                block.push((r, c, -half * v));
                            }
                        }
                    }
                }
                let theta_block: Vec<(usize, usize, f64)> = p
                    .edges
                    .iter()
                    .enumerate()
                    .flat_map(|(e, &(f, to))| [(e, f, -0.5 * p.inv_2vol), (e, to, -0.5 * p.inv_2vol)])
                    .collect();
                if j == 0 || j == k {
                    let rho = if j == 0 { rho0 } else { rho1 };
                    for &(r, c, v) in &block {
                        p.b[s * n + r] -= v * rho[c];
                    }
                    for &(e, c, v) in &theta_block {
                        p.b[k * n + s * ne + e] -= v * rho[c];
                    }
                } else {
                    for &(r, c, v) in &block {
                        t.push((s * n + r, p.rho_col(j, c), v));
                    }
                    for &(e, c, v) in &theta_block {
                        t.push((k * n + s * ne + e, p.rho_col(j, c), v));
                    }
                }
            }
            for (e, edge) in grid.edges().iter().enumerate() {
                let d = dt * vol / grid.spacing(edge.axis);
                t.push((s * n + edge.from, p.m_col(s, e), d));
                t.push((s * n + edge.to, p.m_col(s, e), -d));
                t.push((k * n + s * ne + e, p.th_col(s, e), 1.0));
            }
        }
        let transposed: Vec<(usize, usize, f64)> = t.iter().map(|&(r, c, v)| (c, r, v)).collect();
        p.kmat = Csr::from_triplets(n_rows, t);
        p.kt = Csr::from_triplets(n_cols, transposed);
        p.sigma = p.kmat.abs_row_sums().iter().map(|s| if *s > 0.0 { 1.0 / s } else { 0.0 }).collect();
        p.step = p.kt.abs_row_sums().iter().map(|s| if *s > 0.0 { 1.0 / s } else { 0.0 }).collect();
        p
    }

    fn rho_col(&self, j: usize, i: usize) -> usize {
        (j - 1) * self.n + i
    }

    fn m_col(&self, s: usize, e: usize) -> usize {
        (self.k - 1) * self.n + s * self.ne + e
    }

    fn th_col(&self, s: usize, e: usize) -> usize {
        (self.k - 1) * self.n + self.k * self.ne + s * self.ne + e
    }

    fn density(&self, x: &[f64], j: usize, i: usize) -> f64 {
        if j == 0 {
            self.rho0[i]
        } else if j == self.k {
            self.rho1[i]
        } else {
            x[self.rho_col(j, i)]
        }
    }

    fn theta_of(&self, x: &[f64], s: usize, e: usize) -> f64 {
        let (f, t) = self.edges[e];
        let sum = self.density(x, s, f) + self.density(x, s, t) + self.density(x, s + 1, f) + self.density(x, s + 1, t);
        0.5 * sum * self.inv_2vol
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.kmat.mul(x, out);
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.kt.mul(y, out);
    }

    fn prox(&self, x: &mut [f64]) {
        for v in &mut x[..(self.k - 1) * self.n] {
            *v = v.max(0.0);
        }
        for s in 0..self.k {
            for e in 0..self.ne {
                let (cm, ct) = (self.m_col(s, e), self.th_col(s, e));
                let (tm, tt) = (self.step[cm], self.step[ct]);
                // rescale to a unit-step prox of c' m'^2 / theta'
                let (sm, st) = (tm.sqrt(), tt.sqrt());
                let c = self.weight * tm / st;
                let (m, th) = perspective_prox(x[cm] / sm, x[ct] / st, c);
                x[cm] = m * sm;
                x[ct] = th * st;
            }
        }
    }

    fn rho_part(&self, x: &[f64]) -> Vec<f64> {
        x[..(self.k - 1) * self.n].to_vec()
    }

    /// Densities clipped at zero and renormalized, with the pinned ends.
    fn curve(&self, rho: &[f64]) -> Result<DiscreteCurve> {
        let mut densities = Vec::with_capacity(self.k + 1);
        densities.push(GridDensity::from_parts_unchecked(self.grid.clone(), self.rho0.clone()));
        for j in 1..self.k {
            let mut m: Vec<f64> = rho[(j - 1) * self.n..j * self.n].iter().map(|v| v.max(0.0)).collect();
            let total: f64 = m.iter().sum();
            if !(total > 0.0) {
                return Err(Error::NonConvergence {
                    iterations: 0,
                    residual: f64::INFINITY,
                    detail: "interior slice lost all mass".into(),
                });
            }
            m.iter_mut().for_each(|v| *v /= total);
            densities.push(GridDensity::from_parts_unchecked(self.grid.clone(), m));
        }
        densities.push(GridDensity::from_parts_unchecked(self.grid.clone(), self.rho1.clone()));
        DiscreteCurve::uniform(densities)
    }

    /// Lagrangian dual at the continuity multipliers of `y`, with the edge
    /// multipliers replaced by their optimal values `w^2 / (4 c)`.
    fn dual_bound(&self, y: &[f64]) -> f64 {
        let kn = self.k * self.n;
        let mut yt = y.to_vec();
        yt[kn..].iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; self.n_cols];
        self.apply_transpose(&yt, &mut g);
        for s in 0..self.k {
            for e in 0..self.ne {
                let w = g[self.m_col(s, e)];
                yt[kn + s * self.ne + e] = w * w / (4.0 * self.weight);
            }
        }
        self.apply_transpose(&yt, &mut g);
        let mut value = -yt.iter().zip(&self.b).map(|(a, b)| a * b).sum::<f64>();
        for j in 1..self.k {
            let c0 = self.rho_col(j, 0);
            value += g[c0..c0 + self.n].iter().cloned().fold(f64::INFINITY, f64::min);
        }
        value
    }
}

/// `prox` of `c m^2 / theta` (unit step) at `(m0, t0)`, via the Moreau
/// identity and the projection onto `{(a, b) : b + a^2 / (4c) <= 0}`.
fn perspective_prox(m0: f64, t0: f64, c: f64) -> (f64, f64) {
    if t0 + m0 * m0 / (4.0 * c) <= 0.0 {
        return (0.0, 0.0);
    }
    // projection (a, -a^2/(4c)) solves a^3 / (8 c^2) + a (1 + t0 / (2c)) - m0 = 0;
    // the root shares the sign of m0 and is unique on that side
    let p = 1.0 + t0 / (2.0 * c);
    let q = 1.0 / (8.0 * c * c);
    let g = |a: f64| q * a * a * a + p * a - m0.abs();
    let (mut lo, mut hi) = (0.0, m0.abs().max(1e-300));
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut a = hi;
    for _ in 0..100 {
        let ga = g(a);
        if ga > 0.0 {
            hi = a;
        } else {
            lo = a;
        }
        let d = 3.0 * q * a * a + p;
        let mut next = if d > 0.0 { a - ga / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - a).abs() <= 1e-15 * a.abs().max(1e-300) {
            a = next;
            break;
        }
        a = next;
    }
    let a = a.copysign(m0);
    let b = -a * a / (4.0 * c);
    (m0 - a, (t0 - b).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnalyticPotential, Potential};
    use crate::semigroup::assemble_generator;
    use crate::static_ot::w2_squared;

    #[test]
    fn perspective_prox_is_a_minimizer() {
        for &(m0, t0, c) in &[(1.0, 0.5, 0.3), (-2.0, -1.0, 1.0), (0.3, 2.0, 0.01), (5.0, -3.0, 0.2), (0.0, 1.0, 1.0)] {
            let (m, t) = perspective_prox(m0, t0, c);
            let obj = |m: f64, t: f64| -> f64 {
                let f = if t > 0.0 {
                    c * m * m / t
                } else if m == 0.0 && t == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                f + 0.5 * ((m - m0).powi(2) + (t - t0).powi(2))
            };
            let base = obj(m, t);
            for (dm, dt) in [(1e-4, 0.0), (-1e-4, 0.0), (0.0, 1e-4), (0.0, -1e-4), (1e-4, 1e-4), (-1e-4, 1e-4)] {
                assert!(obj(m + dm, t + dt) >= base - 1e-12, "{m0} {t0} {c}");
            }
        }
    }

    #[test]
    fn kinetic_minimum_brackets_w2() {
        let g = Arc::new(Grid::new_1d(-3.0, 3.0, 24).unwrap());
        let a = GridDensity::gaussian(g.clone(), &[-0.5], 0.4).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.4).unwrap();
        let res = minimize_kinetic_action(&a, &b, 8).unwrap();
        assert!(res.lower_bound <= res.value + 1e-12);
        let w2 = w2_squared(&a, &b).unwrap();
        assert!((res.value - w2).abs() < 0.02 * w2, "{} {w2}", res.value);
    }

    #[test]
    fn flow_endpoint_has_near_zero_value() {
        let g = Arc::new(Grid::new_1d(-4.0, 4.0, 32).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        let op = assemble_generator(&g, &pot).unwrap();
        let a = GridDensity::gaussian(g.clone(), &[1.0], 0.5).unwrap();
        let tau = 0.2;
        let b = op.scaled(tau).evolve(&a, 1.0).unwrap();
        let res = minimize_controlled_action(&a, &b, &op, tau, 8).unwrap();
        assert!(res.value < 1e-2, "{}", res.value);
        assert!(res.lower_bound <= res.value + 1e-12);
        assert!(res.curve.continuity_residual() < 1e-8);
    }

    #[test]
    fn potential_multipliers_reproduce_the_primal() {
        // at multipliers f_s / (2 tau) the Lagrangian equals the reduced
        // primal, and its rho-coefficients equal the reduced gradient
        let g = Arc::new(Grid::new_1d(-6.0, 6.0, 24).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        let op = assemble_generator(&g, &pot).unwrap();
        let a = GridDensity::gaussian(g.clone(), &[0.0], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.5], 0.3).unwrap();
        let (k, tau) = (4, 0.1);
        let problem = Problem::new(&g, a.masses(), b.masses(), Some(&op), tau, k);
        let red = Reduced {
            grid: g.clone(),
            k,
            tau,
            a: Some(op.dense()),
            rho0: a.masses().to_vec(),
            rho1: b.masses().to_vec(),
        };
        let times: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        let geo = displacement_interpolation(&a, &b, &times).unwrap();
        let interior: Vec<Vec<f64>> = geo.densities[1..k].iter().map(|d| d.masses().to_vec()).collect();
        let ev = red.evaluate(&interior, false).unwrap();
        let mut y = vec![0.0; problem.n_rows];
        for (s, f) in ev.potentials.iter().enumerate() {
            for (i, v) in f.iter().enumerate() {
                y[s * problem.n + i] = v / (2.0 * tau);
            }
        }
        let kn = k * problem.n;
        let mut gv = vec![0.0; problem.n_cols];
        problem.apply_transpose(&y, &mut gv);
        for s in 0..k {
            for e in 0..problem.ne {
                let w = gv[problem.m_col(s, e)];
                y[kn + s * problem.ne + e] = w * w / (4.0 * problem.weight);
            }
        }
        problem.apply_transpose(&y, &mut gv);
        let mut lagrangian = -y.iter().zip(&problem.b).map(|(a, b)| a * b).sum::<f64>();
        for j in 1..k {
            for i in 0..problem.n {
                let coef = gv[problem.rho_col(j, i)];
                assert!((coef - ev.grad[(j - 1) * problem.n + i]).abs() < 1e-9 * (1.0 + coef.abs()));
                lagrangian += coef * interior[j - 1][i];
            }
        }
        assert!((lagrangian - ev.value).abs() < 1e-10 * ev.value);
        assert!(problem.dual_bound(&y) <= ev.value);
    }
}
