//! Free energy, relative Fisher information and the density-weighted
//! `H^-1` norm.
//!
//! The `H^-1(rho)` norm of a zero-sum measure `s` is computed two ways:
//! as `s^T L^+ s` with `L` the weighted Laplacian (dual form) and as the
//! minimal kinetic energy of a flux with divergence `-s` (flux form). The
//! flux form solves its own constrained least-squares problem on a cycle
//! basis of the grid graph and shares no code with the dual form beyond the
//! edge weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{edge_density, weighted_laplacian, EdgeField, GridDensity, GridSignedMeasure, Potential};
use crate::linalg::dot;
use crate::semigroup::{bernoulli, FPOperator};

/// Fisher terms above this are reported as infinite.
pub const FISHER_BLOWUP: f64 = 1e12;

/// Default slack below which the HWI inequality counts as violated.
pub const HWI_TOLERANCE: f64 = 1e-3;

/// A value in `[0, +inf]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn is_finite(&self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    /// Unwraps a finite value or returns `err`.
    pub fn ok_or(self, err: Error) -> Result<f64> {
        self.finite().ok_or(err)
    }
}

impl std::fmt::Display for Extended {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinite => write!(f, "inf"),
        }
    }
}

/// `F(rho) = sum (f log f + Psi f) vol` with `f` the density value.
pub fn free_energy(rho: &GridDensity, pot: &Potential) -> Result<f64> {
    rho.grid().check(pot.grid(), "free energy")?;
    let vol = rho.grid().cell_volume();
    Ok(rho
        .masses()
        .iter()
        .zip(pot.psi())
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, psi)| m * ((m / vol).ln() + psi))
        .sum())
}

/// Relative Fisher information `int |grad g|^2 / g d nu`, `g = d rho / d nu`.
///
/// Edge terms use the logarithmic mean of `g` and the exponentially fitted
/// edge weight of `e^{-Psi}`, so the sum equals the exact entropy
/// dissipation rate of the semi-discrete Fokker-Planck flow.
pub fn fisher_information_quadrature(rho: &GridDensity, pot: &Potential) -> Result<Extended> {
    let grid = rho.grid();
    grid.check(pot.grid(), "fisher information")?;
    let vol = grid.cell_volume();
    let f = rho.density_values();
    let psi = pot.psi();
    let mut total = 0.0;
    for e in grid.edges() {
        let (fi, fj) = (f[e.from], f[e.to]);
        if fi == 0.0 && fj == 0.0 {
            continue;
        }
        if fi == 0.0 || fj == 0.0 {
            return Ok(Extended::Infinite);
        }
        let z = psi[e.to] - psi[e.from];
        // nu_e (g_i - g_j) and log g_i - log g_j
        let flow = bernoulli(z) * fi - bernoulli(-z) * fj;
        let dlog = fi.ln() - fj.ln() - z;
        let term = vol / grid.spacing(e.axis).powi(2) * flow * dlog;
        if !(term <= FISHER_BLOWUP) {
            return Ok(Extended::Infinite);
        }
        total += term;
    }
    Ok(Extended::Finite(total.max(0.0)))
}

/// Fisher information in metric form, `||A rho||^2_{-1,rho}`.
pub fn fisher_information_metric(rho: &GridDensity, op: &FPOperator) -> Result<Extended> {
    let s = op.apply_density(rho)?;
    match hm1_norm(&s, rho) {
        Ok(sol) => Ok(Extended::Finite(sol.norm_sq)),
        Err(Error::InfeasibleSupport { .. }) => Ok(Extended::Infinite),
        Err(e) => Err(e),
    }
}

/// Optimal test function and flux of the weighted `H^-1` problem.
#[derive(Debug, Clone)]
pub struct Hm1Solution {
    pub norm_sq: f64,
    /// Solution of `L f = s`, zero at one cell per connected component.
    pub potential_f: Vec<f64>,
    /// `theta ⊙ grad f`; its divergence is `-s`.
    pub flux_m: EdgeField,
}

/// `||s||^2_{-1,rho} = s^T L_rho^+ s`.
pub fn hm1_norm(s: &GridSignedMeasure, rho: &GridDensity) -> Result<Hm1Solution> {
    s.grid().check(rho.grid(), "hm1 norm")?;
    let lap = weighted_laplacian(rho);
    let f = lap.solver()?.solve(s.values())?;
    let norm_sq = dot(s.values(), &f).max(0.0);
    let grid = rho.grid();
    let theta = edge_density(rho);
    let flux = grid
        .edges()
        .iter()
        .zip(&theta)
        .map(|(e, t)| t * (f[e.to] - f[e.from]) / grid.spacing(e.axis))
        .collect();
    Ok(Hm1Solution {
        norm_sq,
        potential_f: f,
        flux_m: EdgeField::new(grid.clone(), flux)?,
    })
}

/// `s1^T L_rho^+ s2`.
pub fn hm1_inner(s1: &GridSignedMeasure, s2: &GridSignedMeasure, rho: &GridDensity) -> Result<f64> {
    s1.grid().check(rho.grid(), "hm1 inner")?;
    s2.grid().check(rho.grid(), "hm1 inner")?;
    let solver = weighted_laplacian(rho).solver()?;
    solver.check_balance(s1.values())?;
    let f2 = solver.solve(s2.values())?;
    Ok(dot(s1.values(), &f2))
}

/// `min { sum_e |m_e|^2 / theta_e * vol : div m = -s }`.
///
/// Works in mass-flow variables `q_e = m_e vol / h_e`, for which the
/// objective is `sum q_e^2 / w_e` with `w_e = theta_e vol / h_e^2`. Edges
/// with `theta_e = 0` carry no flow. A spanning-forest flow meets the
/// constraint; the remaining freedom is the cycle space, optimized by
/// dense normal equations.
pub fn hm1_norm_flux_form(s: &GridSignedMeasure, rho: &GridDensity) -> Result<f64> {
    s.grid().check(rho.grid(), "hm1 flux form")?;
    let grid = rho.grid();
    let n = grid.n_cells();
    let weights = weighted_laplacian(rho).weights().to_vec();
    let live: Vec<(usize, usize, f64)> = grid
        .edges()
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(e, w)| (e.from, e.to, *w))
        .collect();

    // spanning forest by BFS
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, &(i, j, _)) in live.iter().enumerate() {
        adj[i].push((j, k));
        adj[j].push((i, k));
    }
    let mut parent_edge = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut depth = vec![0usize; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut is_tree = vec![false; live.len()];
    for root in 0..n {
        if visited[root] {
            continue;
        }
        visited[root] = true;
        let start = order.len();
        order.push(root);
        let mut head = start;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(v, k) in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = u;
                    parent_edge[v] = k;
                    depth[v] = depth[u] + 1;
                    is_tree[k] = true;
                    order.push(v);
                }
            }
        }
    }

    // particular solution: each tree edge carries the net demand of its subtree
    let mut q0 = vec![0.0; live.len()];
    let mut excess: Vec<f64> = s.values().iter().map(|v| -v).collect();
    let scale: f64 = s.values().iter().map(|v| v.abs()).sum();
    for &v in order.iter().rev() {
        if parent[v] == usize::MAX {
            if excess[v].abs() > 1e-9 * scale + 1e-300 {
                return Err(Error::InfeasibleSupport {
                    cell: v,
                    imbalance: -excess[v],
                });
            }
            continue;
        }
        // net outflow required from the subtree rooted at v is excess[v]
        let k = parent_edge[v];
        let (from, _, _) = live[k];
        let out = excess[v];
        q0[k] = if from == v { out } else { -out };
        excess[parent[v]] += excess[v];
    }

    // cycle basis from non-tree edges
    let cotree: Vec<usize> = (0..live.len()).filter(|k| !is_tree[*k]).collect();
    let objective = |q: &[f64]| -> f64 { q.iter().zip(&live).map(|(q, (_, _, w))| q * q / w).sum() };
    if cotree.is_empty() {
        return Ok(objective(&q0));
    }
    let m = live.len();
    let c = cotree.len();
    let mut basis = DMatrix::<f64>::zeros(m, c);
    for (col, &k) in cotree.iter().enumerate() {
        let (a, b, _) = live[k];
        basis[(k, col)] = 1.0;
        // close the loop with the tree path from b back to a
        let (mut x, mut y) = (b, a);
        while x != y {
            if depth[x] >= depth[y] {
                let pe = parent_edge[x];
                let sign = if live[pe].0 == x { 1.0 } else { -1.0 };
                basis[(pe, col)] += sign;
                x = parent[x];
            } else {
                let pe = parent_edge[y];
                let sign = if live[pe].0 == y { -1.0 } else { 1.0 };
                basis[(pe, col)] += sign;
                y = parent[y];
            }
        }
    }
    let winv = DVector::from_iterator(m, live.iter().map(|(_, _, w)| 1.0 / w));
    let mut weighted = basis.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        row *= winv[r];
    }
    let normal = basis.transpose() * &weighted;
    let rhs = -(weighted.transpose() * DVector::from_vec(q0.clone()));
    let coeffs = normal
        .cholesky()
        .ok_or_else(|| Error::LinearSolveFailure("cycle-space normal equations".into()))?
        .solve(&rhs);
    let q = DVector::from_vec(q0) + basis * coeffs;
    Ok(objective(q.as_slice()))
}

/// Both sides of `F(rho) - F(nu) <= W2 sqrt(G) - lambda/2 W2^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HwiReport {
    /// Relative entropy of `rho` with respect to the normalized Gibbs measure.
    pub lhs: f64,
    pub rhs: Extended,
    pub slack: Extended,
    pub violated: bool,
}

pub fn hwi_check(rho: &GridDensity, pot: &Potential, w2_to_nu: f64) -> Result<HwiReport> {
    hwi_check_with_tolerance(rho, pot, w2_to_nu, HWI_TOLERANCE)
}

pub fn hwi_check_with_tolerance(rho: &GridDensity, pot: &Potential, w2_to_nu: f64, tol: f64) -> Result<HwiReport> {
    if !(w2_to_nu >= 0.0) {
        return Err(Error::InvalidArgument(format!("W2 distance {w2_to_nu} must be nonnegative")));
    }
    let lhs = free_energy(rho, pot)? - free_energy(&pot.gibbs_density(), pot)?;
    let g = fisher_information_quadrature(rho, pot)?;
    let (rhs, slack) = match g {
        Extended::Finite(g) => {
            let r = w2_to_nu * g.sqrt() - 0.5 * pot.lambda() * w2_to_nu * w2_to_nu;
            (Extended::Finite(r), Extended::Finite(r - lhs))
        }
        Extended::Infinite if w2_to_nu > 0.0 => (Extended::Infinite, Extended::Infinite),
        // 0 * inf: the inequality carries no information
        Extended::Infinite => (Extended::Finite(0.0), Extended::Finite(-lhs)),
    };
    let violated = matches!(slack, Extended::Finite(s) if s < -tol);
    Ok(HwiReport {
        lhs,
        rhs,
        slack,
        violated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{divergence, gradient, AnalyticPotential, Grid};
    use crate::semigroup::assemble_generator;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn ou(n: usize, lo: f64, hi: f64) -> (Arc<Grid>, Potential) {
        let g = Arc::new(Grid::new_1d(lo, hi, n).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        (g, pot)
    }

    fn hm1_norm_dense(s: &GridSignedMeasure, rho: &GridDensity) -> f64 {
        let l = weighted_laplacian(rho).dense();
        let n = l.len();
        let mat = DMatrix::from_fn(n, n, |i, j| l[i][j]);
        let pinv = mat.pseudo_inverse(1e-12).expect("pseudo inverse");
        let v = DVector::from_column_slice(s.values());
        v.dot(&(pinv * &v))
    }

    fn zero_sum(values: Vec<f64>) -> Vec<f64> {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.into_iter().map(|v| v - mean).collect()
    }

    #[test]
    fn free_energy_of_gibbs_is_minus_log_z() {
        let (_, pot) = ou(200, -6.0, 6.0);
        let nu = pot.gibbs_density();
        let f = free_energy(&nu, &pot).unwrap();
        assert!((f + pot.gibbs_mass().ln()).abs() < 1e-12);
    }

    #[test]
    fn free_energy_of_standard_gaussian() {
        let (g, pot) = ou(512, -8.0, 8.0);
        let rho = GridDensity::gaussian(g, &[0.0], 1.0).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5;
        assert!((free_energy(&rho, &pot).unwrap() - expected).abs() < 1e-3);
    }

    #[test]
    fn free_energy_of_uniform_flat() {
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [2.0, 1.5], [5, 4]).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Flat).unwrap();
        let f = free_energy(&GridDensity::uniform(g), &pot).unwrap();
        assert!((f + 3.0_f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn fisher_of_gibbs_is_zero() {
        let (_, pot) = ou(128, -6.0, 6.0);
        let g = fisher_information_quadrature(&pot.gibbs_density(), &pot).unwrap();
        assert!(g.finite().unwrap() < 1e-20);
    }

    #[test]
    fn fisher_of_gaussians() {
        let (g, pot) = ou(512, -8.0, 8.0);
        let oracle = |m: f64, v: f64| v * (1.0 - 1.0 / v).powi(2) + m * m;
        for (m, v) in [(0.0, 0.5), (0.3, 1.0)] {
            let rho = GridDensity::gaussian(g.clone(), &[m], v).unwrap();
            let value = fisher_information_quadrature(&rho, &pot).unwrap().finite().unwrap();
            assert!((value - oracle(m, v)).abs() < 2e-2, "m={m} v={v}: {value}");
        }
        assert!((oracle(0.0, 0.5) - 0.5).abs() < 1e-15);
        assert!((oracle(0.3, 1.0) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn fisher_quadrature_is_sg_dissipation() {
        let (g, pot) = ou(64, -4.0, 4.0);
        let op = assemble_generator(&g, &pot).unwrap();
        let rho = GridDensity::gaussian(g, &[0.7], 0.4).unwrap();
        // dF/dt = sum (log f + Psi + 1) (A p)
        let ap = op.apply(rho.masses());
        let vol = rho.grid().cell_volume();
        let rate: f64 = rho
            .masses()
            .iter()
            .zip(pot.psi())
            .zip(&ap)
            .map(|((m, psi), a)| ((m / vol).ln() + psi + 1.0) * a)
            .sum();
        let gq = fisher_information_quadrature(&rho, &pot).unwrap().finite().unwrap();
        assert!((gq + rate).abs() < 1e-10 * gq);
    }

    #[test]
    fn fisher_is_infinite_at_support_edge() {
        let (g, pot) = ou(16, -2.0, 2.0);
        let mut w = vec![0.0; 16];
        w[7] = 1.0;
        w[8] = 1.0;
        let rho = GridDensity::from_weights(g, w).unwrap();
        assert_eq!(fisher_information_quadrature(&rho, &pot).unwrap(), Extended::Infinite);
    }

    #[test]
    fn hm1_of_zero_is_zero() {
        let (g, _) = ou(10, -1.0, 1.0);
        let rho = GridDensity::uniform(g.clone());
        let s = GridSignedMeasure::zero(g);
        assert_eq!(hm1_norm(&s, &rho).unwrap().norm_sq, 0.0);
        assert_eq!(hm1_norm_flux_form(&s, &rho).unwrap(), 0.0);
        assert_eq!(hm1_inner(&s, &s, &rho).unwrap(), 0.0);
    }

    #[test]
    fn hm1_adjacent_hop_hand_value() {
        // moving mass delta from cell 2 to 3: q = delta on one edge,
        // cost delta^2 / w with w = theta vol / h^2
        let g = Arc::new(Grid::new_1d(0.0, 3.0, 6).unwrap());
        let rho = GridDensity::uniform(g.clone());
        let delta = 0.01;
        let mut v = vec![0.0; 6];
        v[2] = -delta;
        v[3] = delta;
        let s = GridSignedMeasure::new(g.clone(), v).unwrap();
        let (h, vol) = (0.5, 0.5);
        let theta = (1.0 / 6.0) / vol;
        let expected = delta * delta * h * h / (theta * vol);
        assert!((hm1_norm(&s, &rho).unwrap().norm_sq - expected).abs() < 1e-15);
        assert!((hm1_norm_flux_form(&s, &rho).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn hm1_plug_in_identity_and_flux_membership() {
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 1.0], [5, 4]).unwrap());
        let w: Vec<f64> = (0..20).map(|i| 1.0 + 0.5 * (i as f64 * 0.9).sin()).collect();
        let rho = GridDensity::from_weights(g.clone(), w).unwrap();
        let psi: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).cos()).collect();
        let theta = edge_density(&rho);
        let grad = gradient(&psi, &g).unwrap();
        let m = EdgeField::new(g.clone(), grad.values().iter().zip(&theta).map(|(a, t)| a * t).collect()).unwrap();
        let s = divergence(&m, &g).unwrap();
        let explicit = m.inner(&grad);
        let sol = hm1_norm(&s, &rho).unwrap();
        assert!((sol.norm_sq - explicit).abs() < 1e-10 * explicit);
        // the optimal flux reproduces -s and equals theta grad psi
        let back = divergence(&sol.flux_m, &g).unwrap();
        for (a, b) in back.values().iter().zip(s.values()) {
            assert!((a + b).abs() < 1e-10);
        }
        for (a, b) in sol.flux_m.values().iter().zip(m.values()) {
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn hm1_infeasible_through_empty_cells() {
        let (g, _) = ou(6, 0.0, 1.0);
        let rho = GridDensity::new(g.clone(), vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = GridSignedMeasure::new(g, vec![0.1, 0.0, 0.0, 0.0, 0.0, -0.1]).unwrap();
        assert!(matches!(hm1_norm(&s, &rho), Err(Error::InfeasibleSupport { .. })));
        assert!(matches!(hm1_norm_flux_form(&s, &rho), Err(Error::InfeasibleSupport { .. })));
    }

    #[test]
    fn hm1_matches_dense_pseudoinverse() {
        let g = Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 1.0], [4, 4]).unwrap());
        let rho = GridDensity::uniform(g.clone());
        let s = zero_sum((0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.01).collect());
        let s = GridSignedMeasure::new(g, s).unwrap();
        let dense = hm1_norm_dense(&s, &rho);
        assert!((hm1_norm(&s, &rho).unwrap().norm_sq - dense).abs() < 1e-10);
    }

    #[test]
    fn hwi_cases() {
        let (g, pot) = ou(256, -8.0, 8.0);
        let nu = pot.gibbs_density();
        let r = hwi_check(&nu, &pot, 0.0).unwrap();
        assert!(r.lhs.abs() < 1e-12 && !r.violated);
        // Gaussian distances to the standard normal
        for (m, v) in [(0.0_f64, 0.5_f64), (1.0, 1.0)] {
            let rho = GridDensity::gaussian(g.clone(), &[m], v).unwrap();
            let w2 = (m * m + (v.sqrt() - 1.0).powi(2)).sqrt();
            let r = hwi_check(&rho, &pot, w2).unwrap();
            assert!(!r.violated, "{r:?}");
            assert!(r.slack.finite().unwrap() > -1e-3);
        }
    }

    #[test]
    fn metric_fisher_vanishes_at_equilibrium() {
        let (g, pot) = ou(64, -5.0, 5.0);
        let op = assemble_generator(&g, &pot).unwrap();
        let value = fisher_information_metric(&pot.gibbs_density(), &op).unwrap();
        assert!(value.finite().unwrap() < 1e-20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dual_and_flux_forms_agree(
            nx in 2usize..8, ny in 1usize..8,
            seed in proptest::collection::vec(0.05f64..1.0, 64),
            svals in proptest::collection::vec(-1.0f64..1.0, 64),
        ) {
            let g = if ny == 1 {
                Arc::new(Grid::new_1d(0.0, 1.0, nx).unwrap())
            } else {
                Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 2.0], [nx, ny]).unwrap())
            };
            let n = g.n_cells();
            let rho = GridDensity::from_weights(g.clone(), seed[..n].to_vec()).unwrap();
            let s = GridSignedMeasure::new(g, zero_sum(svals[..n].to_vec())).unwrap();
            let dual = hm1_norm(&s, &rho).unwrap().norm_sq;
            let flux = hm1_norm_flux_form(&s, &rho).unwrap();
            prop_assert!((dual - flux).abs() <= 1e-8 * dual.max(1e-300));
        }

        #[test]
        fn norm_scales_quadratically(alpha in -5.0f64..5.0, svals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let g = Arc::new(Grid::new_1d(0.0, 1.0, 12).unwrap());
            let rho = GridDensity::gaussian(g.clone(), &[0.5], 0.1).unwrap();
            let s = GridSignedMeasure::new(g, zero_sum(svals)).unwrap();
            let a = hm1_norm(&s.scaled(alpha), &rho).unwrap().norm_sq;
            let b = hm1_norm(&s, &rho).unwrap().norm_sq;
            prop_assert!((a - alpha * alpha * b).abs() <= 1e-12 * (a.abs() + 1e-300) * 10.0);
        }

        #[test]
        fn inner_product_polarization(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            b in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let g = Arc::new(Grid::new_2d([0.0, 0.0], [1.0, 1.0], [4, 4]).unwrap());
            let rho = GridDensity::uniform(g.clone());
            let s1 = GridSignedMeasure::new(g.clone(), zero_sum(a)).unwrap();
            let s2 = GridSignedMeasure::new(g, zero_sum(b)).unwrap();
            let plus = hm1_norm(&s1.add(&s2, 1.0).unwrap(), &rho).unwrap().norm_sq;
            let minus = hm1_norm(&s1.add(&s2, -1.0).unwrap(), &rho).unwrap().norm_sq;
            let inner = hm1_inner(&s1, &s2, &rho).unwrap();
            prop_assert!((inner - 0.25 * (plus - minus)).abs() < 1e-10);
            let sym = hm1_inner(&s2, &s1, &rho).unwrap();
            prop_assert!((inner - sym).abs() < 1e-12);
        }

        #[test]
        fn adjointness_and_zero_sum(
            nx in 2usize..12, ny in 2usize..12,
            f in proptest::collection::vec(-1.0f64..1.0, 144),
            m in proptest::collection::vec(-1.0f64..1.0, 264),
        ) {
            let g = Arc::new(Grid::new_2d([0.0, -1.0], [1.0, 2.0], [nx, ny]).unwrap());
            let f = &f[..g.n_cells()];
            let m = EdgeField::new(g.clone(), m[..g.n_edges()].to_vec()).unwrap();
            let grad = gradient(f, &g).unwrap();
            let div = divergence(&m, &g).unwrap();
            let lhs = grad.inner(&m);
            let rhs = -dot(f, div.values());
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!(div.total().abs() < 1e-12);
            let rho = GridDensity::from_weights(g.clone(), f.iter().map(|v| v.abs() + 0.01).collect()).unwrap();
            let lap = weighted_laplacian(&rho);
            prop_assert!(lap.apply(&vec![3.5; g.n_cells()]).iter().all(|v| v.abs() < 1e-13));
        }
    }
}
