//! The 1D JKO step against a brute-force minimization that shares no code
//! with the crate's transport or proximal machinery.

use std::sync::Arc;

use ldpflow::jko::jko_step;
use ldpflow::{AnalyticPotential, Grid, GridDensity, Potential};

/// CDF breakpoints of a piecewise-constant density.
fn cdf(m: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0];
    for v in m {
        c.push(c.last().unwrap() + v);
    }
    let total = *c.last().unwrap();
    c.iter().map(|x| x / total).collect()
}

/// The linear piece of the quantile function covering `[u0, u1]`, evaluated at both ends.
fn quantile_piece(c: &[f64], lo: f64, h: f64, u0: f64, u1: f64) -> (f64, f64) {
    let mid = 0.5 * (u0 + u1);
    let i = (0..c.len() - 1)
        .find(|&i| c[i + 1] > c[i] && c[i] <= mid && mid <= c[i + 1])
        .unwrap_or(c.len() - 2);
    let x = |u: f64| lo + h * (i as f64 + (u - c[i]) / (c[i + 1] - c[i]));
    (x(u0), x(u1))
}

/// `int_0^1 (Q0 - Q1)^2 du` with both quantiles piecewise linear.
fn w2sq_quantile(a: &[f64], b: &[f64], lo: f64, h: f64) -> f64 {
    let (ca, cb) = (cdf(a), cdf(b));
    let mut us: Vec<f64> = ca.iter().chain(&cb).copied().collect();
    us.sort_by(f64::total_cmp);
    us.dedup();
    us.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (p0, p1) = quantile_piece(&ca, lo, h, w[0], w[1]);
            let (q0, q1) = quantile_piece(&cb, lo, h, w[0], w[1]);
            let (d0, d1) = (p0 - q0, p1 - q1);
            (d0 * d0 + d0 * d1 + d1 * d1) / 3.0 * (w[1] - w[0])
        })
        .sum()
}

/// Euclidean projection onto `{m >= floor, sum m = 1}`.
fn project(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let radius = 1.0 - n * floor;
    let w: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let mut s = w.clone();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, x) in s.iter().enumerate() {
        acc += x;
        let t = (acc - radius) / (k as f64 + 1.0);
        if x - t > 0.0 {
            theta = t;
        }
    }
    w.iter().map(|x| (x - theta).max(0.0) + floor).collect()
}

#[test]
fn tiny_step_matches_projected_gradient_oracle() {
    let (lo, hi, n, t) = (-1.5, 1.5, 12, 0.1);
    let grid = Arc::new(Grid::new_1d(lo, hi, n).unwrap());
    let h = grid.spacing(0);
    let pot = Potential::sample(grid.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
    let rho0 = GridDensity::gaussian(grid.clone(), &[0.4], 0.5).unwrap();
    let m0 = rho0.masses().to_vec();
    let psi: Vec<f64> = (0..n).map(|i| 0.5 * grid.cell_center(i)[0].powi(2)).collect();

    let free = |m: &[f64]| -> f64 { m.iter().zip(&psi).map(|(v, p)| v * ((v / h).ln() + p)).sum() };
    let j = |m: &[f64]| free(m) - free(&m0) + w2sq_quantile(m, &m0, lo, h) / (2.0 * t);
    let grad = |m: &[f64]| -> Vec<f64> {
        let d = 1e-7;
        (0..n)
            .map(|i| {
                let (mut p, mut q) = (m.to_vec(), m.to_vec());
                p[i] += d;
                q[i] -= d;
                (j(&p) - j(&q)) / (2.0 * d)
            })
            .collect()
    };

    let mut x = m0.clone();
    let mut fx = j(&x);
    let mut step = 1e-2;
    for _ in 0..100_000 {
        let g = grad(&x);
        let mut moved = false;
        while step > 1e-16 {
            let y = project(&x.iter().zip(&g).map(|(a, b)| a - step * b).collect::<Vec<_>>(), 1e-12);
            let descent: f64 = g.iter().zip(y.iter().zip(&x)).map(|(gi, (yi, xi))| gi * (yi - xi)).sum();
            let fy = j(&y);
            if fy <= fx + 1e-4 * descent {
                let change = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = y;
                fx = fy;
                moved = change > 1e-15;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }

    let r = jko_step(&rho0, &pot, t).unwrap();
    let scale = fx.abs().max(1.0);
    assert!(
        (r.objective - fx).abs() <= 1e-6 * scale,
        "solver {} oracle {}",
        r.objective,
        fx
    );
    let l1: f64 = r.minimizer.masses().iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 < 1e-3, "minimizer distance {l1}");
}

#[test]
fn quantile_distance_of_a_shift_is_the_shift_squared() {
    // shifting by whole cells moves every quantile by the same amount
    let a = [0.0, 0.2, 0.5, 0.3, 0.0, 0.0];
    let b = [0.0, 0.0, 0.0, 0.2, 0.5, 0.3];
    assert!((w2sq_quantile(&a, &b, 0.0, 0.5) - 1.0).abs() < 1e-14);
}
