//! The controlled action as a function of the interior densities alone.
//!
//! For fixed densities the momenta are solved exactly, which leaves
//! `P(rho) = sum_s c d_s^T L_s^+ d_s` with `d_s` and the weights of `L_s`
//! affine in `rho`. `P` is convex with the block-tridiagonal Hessian
//! `2c J_s^T L_s^+ J_s`, `J_s` the Jacobian of `d_s - L_s f_s` at fixed
//! `f_s = L_s^+ d_s`. It is minimized over products of simplices by a
//! log-barrier Newton method.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{weighted_laplacian, Grid, GridDensity};
use crate::linalg::dot;

pub(super) struct Reduced {
    pub grid: Arc<Grid>,
    pub k: usize,
    pub tau: f64,
    /// Dense generator, or `None` for the drift-free action.
    pub a: Option<Vec<Vec<f64>>>,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
}

/// Diagonal and super-diagonal blocks of a block-tridiagonal matrix.
pub(super) type BlockTridiag = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

pub(super) struct Evaluation {
    pub value: f64,
    /// Gradient for interior samples, stacked.
    pub grad: Vec<f64>,
    /// `f_s = L_s^+ d_s` per step.
    pub potentials: Vec<Vec<f64>>,
    /// Diagonal and super-diagonal blocks of the Hessian, when requested.
    pub hessian: Option<BlockTridiag>,
}

impl Reduced {
    fn n(&self) -> usize {
        self.grid.n_cells()
    }

    fn c(&self) -> f64 {
        1.0 / (4.0 * self.tau * self.k as f64)
    }

    fn apply_a(&self, p: &[f64]) -> Vec<f64> {
        match &self.a {
            Some(a) => a.iter().map(|row| dot(row, p)).collect(),
            None => vec![0.0; p.len()],
        }
    }

    /// All samples, pinned ends included.
    fn samples<'a>(&'a self, interior: &'a [Vec<f64>]) -> Vec<&'a [f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(self.k + 1);
        v.push(&self.rho0);
        v.extend(interior.iter().map(|x| x.as_slice()));
        v.push(&self.rho1);
        v
    }

    pub fn evaluate(&self, interior: &[Vec<f64>], with_hessian: bool) -> Result<Evaluation> {
        let n = self.n();
        let k = self.k;
        let dt = 1.0 / k as f64;
        let c = self.c();
        let rho = self.samples(interior);
        let mut value = 0.0;
        let mut grad = vec![vec![0.0; n]; k + 1];
        let mut potentials = Vec::with_capacity(k);
        let mut diag = vec![DMatrix::zeros(n, n); k + 1];
        let mut off = vec![DMatrix::zeros(n, n); k];
        for s in 0..k {
            let mid: Vec<f64> = rho[s].iter().zip(rho[s + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
            let a_mid = self.apply_a(&mid);
            let d: Vec<f64> = (0..n)
                .map(|i| (rho[s + 1][i] - rho[s][i]) / dt - self.tau * a_mid[i])
                .collect();
            let solver = weighted_laplacian(&GridDensity::from_parts_unchecked(self.grid.clone(), mid)).solver()?;
            let f = solver.solve(&d)?;
            value += c * dot(&d, &f);
            // Q[:, i] = d(L f) / d rho_i for either endpoint of the step
            let mut q = DMatrix::<f64>::zeros(n, n);
            for e in self.grid.edges() {
                let h = self.grid.spacing(e.axis);
                let kappa = (f[e.from] - f[e.to]) / (4.0 * h * h);
                for i in [e.from, e.to] {
                    q[(e.from, i)] += kappa;
                    q[(e.to, i)] -= kappa;
                }
            }
            // J for rho_s and rho_{s+1}: -+ I / dt - (tau / 2) A - Q
            let mut common = -q;
            if let Some(a) = &self.a {
                for (r, row) in a.iter().enumerate() {
                    for (col, v) in row.iter().enumerate() {
                        common[(r, col)] -= 0.5 * self.tau * v;
                    }
                }
            }
            let fv = DVector::from_column_slice(&f);
            let mut j_lo = common.clone();
            let mut j_hi = common;
            for i in 0..n {
                j_lo[(i, i)] -= 1.0 / dt;
                j_hi[(i, i)] += 1.0 / dt;
            }
            // gradient 2c J_d^T f - c Q^T f, with J = J_d - Q
            let qtf = q_transpose_f(&self.grid, &f);
            let g_lo = j_lo.tr_mul(&fv) * (2.0 * c);
            let g_hi = j_hi.tr_mul(&fv) * (2.0 * c);
            for i in 0..n {
                grad[s][i] += g_lo[i] + c * qtf[i];
                grad[s + 1][i] += g_hi[i] + c * qtf[i];
            }
            if with_hessian {
                let gj_lo = grounded_columns(&solver, &j_lo)?;
                let gj_hi = grounded_columns(&solver, &j_hi)?;
                diag[s] += j_lo.tr_mul(&gj_lo) * (2.0 * c);
                diag[s + 1] += j_hi.tr_mul(&gj_hi) * (2.0 * c);
                off[s] += j_lo.tr_mul(&gj_hi) * (2.0 * c);
            }
            potentials.push(f);
        }
        let hessian = with_hessian.then(|| {
            let d: Vec<DMatrix<f64>> = diag.drain(1..k).collect();
            let o: Vec<DMatrix<f64>> = if k >= 2 { off.drain(1..k - 1).collect() } else { Vec::new() };
            (d, o)
        });
        Ok(Evaluation {
            value,
            grad: grad[1..k].concat(),
            potentials,
            hessian,
        })
    }

    /// Newton steps on `P - mu sum log rho` with unit mass per interior
    /// sample, until the iterate is centered or the line search stalls.
    /// Returns the number of steps taken.
    pub fn barrier_stage(&self, interior: &mut [Vec<f64>], mu: f64, max_steps: usize) -> Result<usize> {
        let n = self.n();
        let m = self.k - 1;
        if m == 0 {
            return Ok(0);
        }
        let barrier = |x: &[Vec<f64>], p: f64| -> f64 { p - mu * x.iter().flatten().map(|v| v.ln()).sum::<f64>() };
        for step in 0..max_steps {
            let ev = self.evaluate(interior, true)?;
            let (hd, ho) = ev.hessian.expect("requested");
            // scale by D = diag(rho): H~ = D H D + mu I, g~ = D g - mu 1
            let mut blocks_d = Vec::with_capacity(m);
            let mut blocks_o = Vec::with_capacity(m.saturating_sub(1));
            for j in 0..m {
                let r = &interior[j];
                let mut b = hd[j].clone();
                for (row, ri) in r.iter().enumerate() {
                    for (col, rc) in r.iter().enumerate() {
                        b[(row, col)] *= ri * rc;
                    }
                    b[(row, row)] += mu;
                }
                blocks_d.push(b);
                if j + 1 < m {
                    let r2 = &interior[j + 1];
                    let mut o = ho[j].clone();
                    for (row, ri) in r.iter().enumerate() {
                        for (col, rc) in r2.iter().enumerate() {
                            o[(row, col)] *= ri * rc;
                        }
                    }
                    blocks_o.push(o);
                }
            }
            let g: Vec<f64> = (0..m * n).map(|idx| interior[idx / n][idx % n] * ev.grad[idx] - mu).collect();
            // centrality: rho_i (grad_i + nu_j) = mu up to mu / 4 on every cell
            // keeps each coefficient above its slice multiplier
            let centered = (0..m).all(|j| {
                let r = &interior[j];
                let gj = &g[j * n..(j + 1) * n];
                let nu = -dot(r, gj) / dot(r, r);
                r.iter().zip(gj).all(|(ri, gi)| (gi + ri * nu).abs() <= 0.25 * mu)
            });
            if centered {
                return Ok(step);
            }
            let fact = BlockTridiagonal::factor(blocks_d, blocks_o)?;
            // rhs columns: g and the scaled mass constraints rho_j
            let mut rhs = DMatrix::<f64>::zeros(m * n, m + 1);
            for idx in 0..m * n {
                rhs[(idx, 0)] = g[idx];
                rhs[(idx, 1 + idx / n)] = interior[idx / n][idx % n];
            }
            let sol = fact.solve(&rhs);
            // E^T H^-1 E nu = -E^T H^-1 g, direction -H^-1 (g + E nu)
            let mut ehe = DMatrix::<f64>::zeros(m, m);
            let mut ehg = DVector::<f64>::zeros(m);
            for a in 0..m {
                for idx in a * n..(a + 1) * n {
                    let e = interior[a][idx % n];
                    ehg[a] += e * sol[(idx, 0)];
                    for b in 0..m {
                        ehe[(a, b)] += e * sol[(idx, 1 + b)];
                    }
                }
            }
            let nu = ehe
                .lu()
                .solve(&(-ehg))
                .ok_or_else(|| Error::LinearSolveFailure("barrier constraint system".into()))?;
            let mut dir = vec![0.0; m * n];
            for (idx, dv) in dir.iter_mut().enumerate() {
                let mut v = sol[(idx, 0)];
                for b in 0..m {
                    v += sol[(idx, 1 + b)] * nu[b];
                }
                *dv = -v;
            }
            let decrement = -dot(&g, &dir);
            if !(decrement > 0.0) {
                return Ok(step);
            }
            // back in rho units: delta = rho * dir; keep rho > 0
            let mut alpha: f64 = 1.0;
            for &dv in &dir {
                if dv < 0.0 {
                    alpha = alpha.min(-0.95 / dv);
                }
            }
            let b0 = barrier(interior, ev.value);
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<Vec<f64>> = (0..m)
                    .map(|j| {
                        let mut r: Vec<f64> = (0..n)
                            .map(|i| interior[j][i] * (1.0 + alpha * dir[j * n + i]))
                            .collect();
                        let s: f64 = r.iter().sum();
                        r.iter_mut().for_each(|v| *v /= s);
                        r
                    })
                    .collect();
                let p = self.evaluate(&trial, false)?.value;
                if barrier(&trial, p) <= b0 - 1e-4 * alpha * decrement {
                    interior.iter_mut().zip(trial).for_each(|(a, b)| *a = b);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Ok(step + 1);
            }
        }
        Ok(max_steps)
    }
}

/// `Q^T f` with `Q` as in [`Reduced::evaluate`]: per cell, the sum over
/// incident edges of `(f_from - f_to)^2 / (4 h^2)`.
fn q_transpose_f(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for e in grid.edges() {
        let h = grid.spacing(e.axis);
        let v = (f[e.from] - f[e.to]).powi(2) / (4.0 * h * h);
        out[e.from] += v;
        out[e.to] += v;
    }
    out
}

fn grounded_columns(solver: &crate::linalg::LaplacianSolver, j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = j.nrows();
    let mut out = DMatrix::<f64>::zeros(n, j.ncols());
    for col in 0..j.ncols() {
        let x = solver.solve_grounded(j.column(col).as_slice())?;
        out.column_mut(col).copy_from_slice(&x);
    }
    Ok(out)
}

/// Block Cholesky of a symmetric positive definite block-tridiagonal matrix.
struct BlockTridiagonal {
    /// Cholesky factors of the Schur complements.
    schur: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    off: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    fn factor(diag: Vec<DMatrix<f64>>, off: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut schur = Vec::with_capacity(diag.len());
        for (j, mut s) in diag.into_iter().enumerate() {
            if j > 0 {
                let prev: &nalgebra::Cholesky<f64, nalgebra::Dyn> = &schur[j - 1];
                let x = prev.solve(&off[j - 1]);
                s -= off[j - 1].tr_mul(&x);
            }
            let s = (&s + s.transpose()) * 0.5;
            // rounding can leave a positive semidefinite block slightly
            // indefinite; retry with growing diagonal shifts
            let max_diag = s.diagonal().iter().cloned().fold(0.0, f64::max);
            let mut shift = 0.0;
            let chol = loop {
                let mut t = s.clone();
                for i in 0..t.nrows() {
                    t[(i, i)] += shift;
                }
                if let Some(c) = nalgebra::Cholesky::new(t) {
                    break c;
                }
                shift = if shift == 0.0 { 1e-14 * max_diag } else { shift * 100.0 };
                if !(shift < max_diag) {
                    return Err(Error::LinearSolveFailure("barrier Hessian is not positive definite".into()));
                }
            };
            schur.push(chol);
        }
        Ok(BlockTridiagonal { schur, off })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.schur.len();
        let n = rhs.nrows() / m;
        let cols = rhs.ncols();
        let block = |x: &DMatrix<f64>, j: usize| x.rows(j * n, n).into_owned();
        // forward: y_j = r_j - C_{j-1}^T S_{j-1}^-1 y_{j-1}
        let mut y: Vec<DMatrix<f64>> = Vec::with_capacity(m);
        for j in 0..m {
            let mut r = block(rhs, j);
            if j > 0 {
                let z = self.schur[j - 1].solve(&y[j - 1]);
                r -= self.off[j - 1].tr_mul(&z);
            }
            y.push(r);
        }
        // backward: x_j = S_j^-1 (y_j - C_j x_{j+1})
        let mut x = vec![DMatrix::<f64>::zeros(n, cols); m];
        for j in (0..m).rev() {
            let mut r = y[j].clone();
            if j + 1 < m {
                r -= &self.off[j] * &x[j + 1];
            }
            x[j] = self.schur[j].solve(&r);
        }
        let mut out = DMatrix::<f64>::zeros(m * n, cols);
        for j in 0..m {
            out.rows_mut(j * n, n).copy_from(&x[j]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnalyticPotential, Potential};
    use crate::semigroup::assemble_generator;

    fn instance() -> (Reduced, Vec<Vec<f64>>) {
        let g = Arc::new(Grid::new_1d(-3.0, 3.0, 10).unwrap());
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        let op = assemble_generator(&g, &pot).unwrap();
        let a = GridDensity::gaussian(g.clone(), &[-0.5], 0.5).unwrap();
        let b = GridDensity::gaussian(g.clone(), &[0.7], 0.3).unwrap();
        let r = Reduced {
            grid: g.clone(),
            k: 3,
            tau: 0.2,
            a: Some(op.dense()),
            rho0: a.masses().to_vec(),
            rho1: b.masses().to_vec(),
        };
        let interior: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                let w: Vec<f64> = (0..10).map(|i| 1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.4).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        (r, interior)
    }

    /// Perturbations keep unit mass so that every difference quotient is
    /// balanced.
    fn perturbed(x: &[Vec<f64>], j: usize, i: usize, eps: f64) -> Vec<Vec<f64>> {
        let mut y = x.to_vec();
        y[j][i] += eps;
        y[j][(i + 1) % 10] -= eps;
        y
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (r, x) = instance();
        let ev = r.evaluate(&x, false).unwrap();
        let eps = 1e-7;
        for j in 0..2 {
            for i in 0..10 {
                let fd = (r.evaluate(&perturbed(&x, j, i, eps), false).unwrap().value
                    - r.evaluate(&perturbed(&x, j, i, -eps), false).unwrap().value)
                    / (2.0 * eps);
                let an = ev.grad[j * 10 + i] - ev.grad[j * 10 + (i + 1) % 10];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{j} {i}: {fd} {an}");
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let (r, x) = instance();
        let ev = r.evaluate(&x, true).unwrap();
        let (hd, ho) = ev.hessian.unwrap();
        let eps = 1e-6;
        // direction v = e_{j,i} - e_{j,i+1}; compare v'^T H v with d/d eps of v'^T grad
        for j in 0..2 {
            for i in 0..10 {
                let gp = r.evaluate(&perturbed(&x, j, i, eps), false).unwrap().grad;
                let gm = r.evaluate(&perturbed(&x, j, i, -eps), false).unwrap().grad;
                let i2 = (i + 1) % 10;
                for jj in 0..2 {
                    for ii in 0..10 {
                        let ii2 = (ii + 1) % 10;
                        let fd = ((gp[jj * 10 + ii] - gp[jj * 10 + ii2]) - (gm[jj * 10 + ii] - gm[jj * 10 + ii2]))
                            / (2.0 * eps);
                        let h = |a: usize, b: usize| -> f64 {
                            if j == jj {
                                hd[j][(b, a)]
                            } else if j < jj {
                                ho[j][(a, b)]
                            } else {
                                ho[jj][(b, a)]
                            }
                        };
                        let an = h(i, ii) - h(i2, ii) - h(i, ii2) + h(i2, ii2);
                        assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "{j} {i} {jj} {ii}: {fd} {an}");
                    }
                }
            }
        }
    }
}
