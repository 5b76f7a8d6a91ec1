//! One-dimensional transport between piecewise-constant densities.
//!
//! A cell mass is spread uniformly over its cell, so quantile functions are
//! piecewise linear and every quantity here is integrated in closed form
//! over the merged breakpoints of the two cumulative distributions.

/// A piecewise-constant density on `[lower, lower + n h]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Line<'a> {
    pub lower: f64,
    pub h: f64,
    pub masses: &'a [f64],
}

/// A piece of the monotone coupling: mass `du` of source cell `i` sent to
/// target cell `j`, the source positions running over `[xa, xb]` and the
/// target positions over `[ya, yb]`, both linearly in the quantile level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Piece {
    pub i: usize,
    pub j: usize,
    pub du: f64,
    pub xa: f64,
    pub xb: f64,
    pub ya: f64,
    pub yb: f64,
}

/// Walks the merged quantile breakpoints of two unit-mass lines.
pub(crate) fn monotone_pieces(a: Line<'_>, b: Line<'_>) -> Vec<Piece> {
    let (n, m) = (a.masses.len(), b.masses.len());
    let mut pieces = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    // mass already consumed in the current cells
    let (mut ci, mut cj) = (0.0, 0.0);
    let skip = |k: &mut usize, masses: &[f64]| {
        while *k < masses.len() && masses[*k] <= 0.0 {
            *k += 1;
        }
    };
    skip(&mut i, a.masses);
    skip(&mut j, b.masses);
    while i < n && j < m {
        let (pi, pj) = (a.masses[i], b.masses[j]);
        let ri = pi - ci;
        let rj = pj - cj;
        let du = ri.min(rj).max(0.0);
        let xi0 = a.lower + a.h * i as f64;
        let yj0 = b.lower + b.h * j as f64;
        let xa = xi0 + a.h * (ci / pi);
        let ya = yj0 + b.h * (cj / pj);
        let (xb, yb, adv_i, adv_j);
        if ri <= rj {
            xb = xi0 + a.h;
            adv_i = true;
            // finishing both cells at once avoids a sliver piece
            adv_j = rj - ri <= 1e-15 * pj;
            yb = if adv_j { yj0 + b.h } else { yj0 + b.h * ((cj + du) / pj) };
        } else {
            yb = yj0 + b.h;
            adv_j = true;
            adv_i = false;
            xb = xi0 + a.h * ((ci + du) / pi);
        }
        if du > 0.0 {
            pieces.push(Piece {
                i,
                j,
                du,
                xa,
                xb,
                ya,
                yb,
            });
        }
        if adv_i {
            i += 1;
            ci = 0.0;
            skip(&mut i, a.masses);
        } else {
            ci += du;
        }
        if adv_j {
            j += 1;
            cj = 0.0;
            skip(&mut j, b.masses);
        } else {
            cj += du;
        }
    }
    pieces
}

/// `int_0^1 (Q_a - Q_b)^2 du` over the pieces.
pub(crate) fn squared_distance(pieces: &[Piece]) -> f64 {
    pieces
        .iter()
        .map(|p| {
            let da = p.xa - p.ya;
            let db = p.xb - p.yb;
            p.du * (da * da + da * db + db * db) / 3.0
        })
        .sum()
}

/// Mass `du` spread uniformly on `[lo, hi]`, deposited into cells.
pub(crate) fn deposit_uniform(out: &mut [f64], lower: f64, h: f64, lo: f64, hi: f64, du: f64) {
    let n = out.len();
    let len = hi - lo;
    let cell_of = |x: f64| -> usize { (((x - lower) / h).floor().max(0.0) as usize).min(n - 1) };
    if !(len > 1e-14 * h) {
        out[cell_of(0.5 * (lo + hi))] += du;
        return;
    }
    let c0 = cell_of(lo);
    let c1 = cell_of(hi);
    if c0 == c1 {
        out[c0] += du;
        return;
    }
    let mut placed = 0.0;
    for (c, slot) in out.iter_mut().enumerate().take(c1).skip(c0) {
        let left = (lower + h * c as f64).max(lo);
        let right = lower + h * (c + 1) as f64;
        let share = du * (right - left).max(0.0) / len;
        *slot += share;
        placed += share;
    }
    out[c1] += du - placed;
}

/// McCann interpolant at time `t`, re-binned onto the cells of `a`.
pub(crate) fn interpolate(pieces: &[Piece], lower: f64, h: f64, n: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for p in pieces {
        let lo = (1.0 - t) * p.xa + t * p.ya;
        let hi = (1.0 - t) * p.xb + t * p.yb;
        deposit_uniform(&mut out, lower, h, lo.min(hi), lo.max(hi), p.du);
    }
    out
}

/// Cell averages of the Kantorovich potential `phi` of the source, with
/// `phi' = 2 (x - T(x))`, normalized to zero at the left end of the box.
///
/// This is the first variation of the squared distance with respect to a
/// uniform-in-cell mass perturbation of the source; on a zero-mass cell the
/// map is extended by its constant value there.
pub(crate) fn source_potential(a: Line<'_>, pieces: &[Piece]) -> Vec<f64> {
    let n = a.masses.len();
    let mut avg = vec![0.0; n];
    // integrate phi over the box, tracking phi at the running position
    let mut x = a.lower;
    let mut phi = 0.0;
    let mut current_t = pieces.first().map(|p| p.ya).unwrap_or(0.0);
    // integral of phi over [x, x + len] when T is linear from t0 to t1
    let integrate = |x0: f64, x1: f64, t0: f64, t1: f64, phi0: &mut f64, avg: &mut [f64]| {
        // split at cell boundaries so each cell receives its own share
        let mut lo = x0;
        while lo < x1 {
            let c = (((lo - a.lower) / a.h).floor().max(0.0) as usize).min(n - 1);
            let cell_end = a.lower + a.h * (c + 1) as f64;
            let hi = if c + 1 == n { x1 } else { cell_end.min(x1) };
            if hi <= lo {
                break;
            }
            let span = x1 - x0;
            let slope = if span > 0.0 { (t1 - t0) / span } else { 0.0 };
            let tlo = t0 + slope * (lo - x0);
            // phi(x) = phi(lo) + 2 int_lo^x (y - T(y)) dy with T(y) = tlo + slope (y - lo)
            // define s = x - lo; integrand y - T(y) = (lo - tlo) + (1 - slope) s
            let d = hi - lo;
            let c0 = lo - tlo;
            let c1 = 1.0 - slope;
            let phi_lo = *phi0;
            let int_phi = phi_lo * d + 2.0 * (c0 * d * d / 2.0 + c1 * d * d * d / 6.0);
            avg[c] += int_phi / a.h;
            *phi0 = phi_lo + 2.0 * (c0 * d + c1 * d * d / 2.0);
            lo = hi;
        }
    };
    for p in pieces {
        if p.xa > x {
            // zero-mass gap in the source: T is constant
            integrate(x, p.xa, current_t, current_t, &mut phi, &mut avg);
        }
        integrate(p.xa.max(x), p.xb, p.ya, p.yb, &mut phi, &mut avg);
        x = x.max(p.xb);
        current_t = p.yb;
    }
    let upper = a.lower + a.h * n as f64;
    if upper > x {
        integrate(x, upper, current_t, current_t, &mut phi, &mut avg);
    }
    avg
}
