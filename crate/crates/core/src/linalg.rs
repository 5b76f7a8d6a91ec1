//! Sparse and banded linear algebra used by the grid solvers.
//!
//! Grid operators on an `nx × ny` grid with row-major cell ordering have
//! bandwidth `nx`, so a banded factorization is a direct sparse solver for
//! them. Larger systems fall back to preconditioned conjugate gradients.

use crate::error::{Error, Result};

/// Cell count above which Laplacian solves switch to conjugate gradients.
pub const DIRECT_SOLVE_LIMIT: usize = 10_000;

/// Relative residual target of the iterative solver.
pub const CG_TOLERANCE: f64 = 1e-11;

/// Symmetric positive definite banded matrix with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // row i holds L[i, i-bw ..= i] at offsets 0..=bw
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Factorizes the matrix given by its lower band (`band[i][k]` = A[i, i-bw+k]).
    pub fn factor(n: usize, bw: usize, mut band: Vec<f64>) -> Result<Self> {
        let w = bw + 1;
        debug_assert_eq!(band.len(), n * w);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut sum = band[i * w + (j + bw - i)];
                for k in k0..j {
                    sum -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::LinearSolveFailure(format!(
                            "non-positive pivot {sum:e} at row {i}"
                        )));
                    }
                    band[i * w + bw] = sum.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = sum / band[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, l: band })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= self.l[k * w + (i + bw - k)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        y
    }
}

/// General banded matrix factored by LU without pivoting.
///
/// Only used for column diagonally dominant M-matrices, for which
/// elimination without pivoting is stable.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    // row i holds A[i, i-bw ..= i+bw] at offsets 0..=2bw
    a: Vec<f64>,
}

impl BandedLu {
    pub fn factor(n: usize, bw: usize, mut a: Vec<f64>) -> Result<Self> {
        let w = 2 * bw + 1;
        debug_assert_eq!(a.len(), n * w);
        for k in 0..n {
            let pivot = a[k * w + bw];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::LinearSolveFailure(format!(
                    "zero pivot at row {k}"
                )));
            }
            for i in (k + 1)..(k + bw + 1).min(n) {
                let lik = a[i * w + (k + bw - i)] / pivot;
                a[i * w + (k + bw - i)] = lik;
                if lik == 0.0 {
                    continue;
                }
                for j in (k + 1)..(k + bw + 1).min(n) {
                    a[i * w + (j + bw - i)] -= lik * a[k * w + (j + bw - k)];
                }
            }
        }
        Ok(Self { n, bw, a })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.a[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..(i + bw + 1).min(n) {
                s -= self.a[i * w + (j + bw - i)] * y[j];
            }
            y[i] = s / self.a[i * w + bw];
        }
        y
    }
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator.
pub fn conjugate_gradient<F>(
    apply: F,
    diag: &[f64],
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let rhs_norm = dot(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * rhs_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: dot(&r, &r).sqrt() / rhs_norm,
        detail: "conjugate gradients".into(),
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Disjoint-set forest with path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Solver for `L f = s` with `L` a weighted graph Laplacian on grid cells.
///
/// `L` is singular with one constant mode per connected component of the
/// positive-weight edge set. Each component is grounded at its
/// highest-priority cell, so right-hand sides that balance on every
/// component are solved exactly and any floating-point imbalance is
/// absorbed at the ground cell instead of being pushed through
/// low-weight edges.
#[derive(Debug, Clone)]
pub struct LaplacianSolver {
    n: usize,
    bw: usize,
    edges: Vec<(usize, usize, f64)>,
    component: Vec<usize>,
    grounds: Vec<usize>,
    is_ground: Vec<bool>,
    backend: Backend,
}

#[derive(Debug, Clone)]
enum Backend {
    Direct(BandedCholesky),
    Iterative { diag: Vec<f64> },
}

impl LaplacianSolver {
    /// `edges` are `(i, j, w)` with `|i - j| <= bw` and `w >= 0`;
    /// `priority` picks the ground cell of each component (largest wins).
    pub fn new(n: usize, bw: usize, edges: Vec<(usize, usize, f64)>, priority: &[f64]) -> Result<Self> {
        let mut uf = UnionFind::new(n);
        for &(i, j, w) in &edges {
            if w > 0.0 {
                uf.union(i, j);
            }
        }
        let mut best: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let r = uf.find(i);
            match best[r] {
                Some(b) if priority[b] >= priority[i] => {}
                _ => best[r] = Some(i),
            }
        }
        let mut component = vec![0; n];
        let mut root_id = vec![usize::MAX; n];
        let mut grounds = Vec::new();
        for i in 0..n {
            let r = uf.find(i);
            if root_id[r] == usize::MAX {
                root_id[r] = grounds.len();
                grounds.push(best[r].expect("every root has a ground"));
            }
            component[i] = root_id[r];
        }
        let mut is_ground = vec![false; n];
        for &g in &grounds {
            is_ground[g] = true;
        }

        let backend = if n <= DIRECT_SOLVE_LIMIT {
            let w = bw + 1;
            let mut band = vec![0.0; n * w];
            for &(i, j, we) in &edges {
                if we <= 0.0 {
                    continue;
                }
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                if !is_ground[i] {
                    band[i * w + bw] += we;
                }
                if !is_ground[j] {
                    band[j * w + bw] += we;
                }
                if !is_ground[lo] && !is_ground[hi] {
                    band[hi * w + (lo + bw - hi)] -= we;
                }
            }
            for g in 0..n {
                if is_ground[g] {
                    band[g * w + bw] = 1.0;
                }
            }
            Backend::Direct(BandedCholesky::factor(n, bw, band)?)
        } else {
            let mut diag = vec![0.0; n];
            for &(i, j, we) in &edges {
                if we > 0.0 {
                    diag[i] += we;
                    diag[j] += we;
                }
            }
            for g in 0..n {
                if is_ground[g] {
                    diag[g] = 1.0;
                }
            }
            Backend::Iterative { diag }
        };
        Ok(Self {
            n,
            bw,
            edges,
            component,
            grounds,
            is_ground,
            backend,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Checks that `s` balances on every component.
    pub fn check_balance(&self, s: &[f64]) -> Result<()> {
        let mut sums = vec![0.0; self.grounds.len()];
        let mut scale = 0.0;
        for (i, &v) in s.iter().enumerate() {
            sums[self.component[i]] += v;
            scale += v.abs();
        }
        // differences of unit-mass vectors carry rounding-level imbalance
        // however small the difference itself is
        let tol = 1e-9 * scale + 1e-13;
        for (c, &sum) in sums.iter().enumerate() {
            if sum.abs() > tol {
                return Err(Error::InfeasibleSupport {
                    cell: self.grounds[c],
                    imbalance: sum,
                });
            }
        }
        Ok(())
    }

    /// Solves `L f = s`; `f` vanishes at the ground cell of each component.
    pub fn solve(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.n {
            return Err(Error::GridMismatch(format!(
                "rhs has {} entries, operator {}",
                s.len(),
                self.n
            )));
        }
        self.check_balance(s)?;
        self.solve_grounded(s)
    }

    /// `G s` with `G` the grounded inverse: symmetric, zero on ground rows
    /// and columns. Agrees with `L^+` in the quadratic form on balanced
    /// vectors.
    pub fn solve_grounded(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = s.to_vec();
        for &g in &self.grounds {
            rhs[g] = 0.0;
        }
        match &self.backend {
            Backend::Direct(chol) => Ok(chol.solve(&rhs)),
            Backend::Iterative { diag } => {
                let apply = |x: &[f64], y: &mut [f64]| self.apply_grounded(x, y);
                conjugate_gradient(apply, diag, &rhs, CG_TOLERANCE, 20 * self.n)
            }
        }
    }

    /// `y = L x` for the ungrounded Laplacian.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(i, j, w) in &self.edges {
            let d = w * (x[i] - x[j]);
            y[i] += d;
            y[j] -= d;
        }
    }

    fn apply_grounded(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(i, j, w) in &self.edges {
            if w <= 0.0 {
                continue;
            }
            let xi = if self.is_ground[i] { 0.0 } else { x[i] };
            let xj = if self.is_ground[j] { 0.0 } else { x[j] };
            let d = w * (xi - xj);
            if !self.is_ground[i] {
                y[i] += d;
            }
            if !self.is_ground[j] {
                y[j] -= d;
            }
        }
        for &g in &self.grounds {
            y[g] = x[g];
        }
    }
}
