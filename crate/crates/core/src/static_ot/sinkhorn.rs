//! Stabilized Sinkhorn scaling on a dense log-kernel.
//!
//! The plan is `pi_ij = exp(alpha_i + beta_j + logk_ij)`. Inner iterations
//! work with bounded multiplicative scalings `u, v` against a kernel that
//! has the current duals absorbed; every [`ABSORB_EVERY`] iterations, or as
//! soon as a scaling leaves `[1e-100, 1e100]`, the scalings are absorbed and
//! one exact log-sum-exp update with a max shift re-centers the duals.

use crate::error::{Error, Result};

pub(crate) const ABSORB_EVERY: usize = 50;
const SCALING_BOUND: f64 = 1e100;
const CHECK_EVERY: usize = 10;

#[derive(Debug, Clone)]
pub(crate) struct LogScaling {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub iterations: usize,
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn exact_row_update(a_log: &[f64], logk: &[f64], beta: &[f64], alpha: &mut [f64]) {
    let m = beta.len();
    for (i, al) in alpha.iter_mut().enumerate() {
        let row = &logk[i * m..(i + 1) * m];
        *al = a_log[i] - log_sum_exp(row.iter().zip(beta).map(|(k, b)| k + b));
    }
}

fn exact_col_update(b_log: &[f64], logk: &[f64], alpha: &[f64], beta: &mut [f64]) {
    let m = beta.len();
    for (j, be) in beta.iter_mut().enumerate() {
        *be = b_log[j] - log_sum_exp(alpha.iter().enumerate().map(|(i, a)| logk[i * m + j] + a));
    }
}

fn absorbed_kernel(logk: &[f64], alpha: &[f64], beta: &[f64], kernel: &mut [f64]) {
    let m = beta.len();
    for (i, al) in alpha.iter().enumerate() {
        for j in 0..m {
            kernel[i * m + j] = (logk[i * m + j] + al + beta[j]).exp();
        }
    }
}

/// Sinkhorn scaling for strictly positive marginals `a`, `b`.
pub(crate) fn solve_log(
    a: &[f64],
    b: &[f64],
    logk: &[f64],
    warm: Option<(Vec<f64>, Vec<f64>)>,
    tol: f64,
    max_iter: usize,
) -> Result<LogScaling> {
    let (n, m) = (a.len(), b.len());
    debug_assert_eq!(logk.len(), n * m);
    let a_log: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let b_log: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let (mut alpha, mut beta) = warm.unwrap_or_else(|| (vec![0.0; n], vec![0.0; m]));
    exact_row_update(&a_log, logk, &beta, &mut alpha);
    exact_col_update(&b_log, logk, &alpha, &mut beta);
    let mut kernel = vec![0.0; n * m];
    absorbed_kernel(logk, &alpha, &beta, &mut kernel);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut since_absorb = 0;
    for iter in 1..=max_iter {
        for i in 0..n {
            let row = &kernel[i * m..(i + 1) * m];
            kv[i] = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
        }
        let mut ok = true;
        for i in 0..n {
            let ui = a[i] / kv[i];
            if !(ui.is_finite() && ui > 1.0 / SCALING_BOUND && ui < SCALING_BOUND) {
                ok = false;
                break;
            }
            u[i] = ui;
        }
        if ok {
            ktu.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                let row = &kernel[i * m..(i + 1) * m];
                let ui = u[i];
                for (t, k) in ktu.iter_mut().zip(row) {
                    *t += k * ui;
                }
            }
            for j in 0..m {
                let vj = b[j] / ktu[j];
                if !(vj.is_finite() && vj > 1.0 / SCALING_BOUND && vj < SCALING_BOUND) {
                    ok = false;
                    break;
                }
                v[j] = vj;
            }
        }
        since_absorb += 1;
        if !ok || since_absorb >= ABSORB_EVERY {
            if ok {
                for i in 0..n {
                    alpha[i] += u[i].ln();
                }
                for j in 0..m {
                    beta[j] += v[j].ln();
                }
            }
            exact_row_update(&a_log, logk, &beta, &mut alpha);
            exact_col_update(&b_log, logk, &alpha, &mut beta);
            absorbed_kernel(logk, &alpha, &beta, &mut kernel);
            u.iter_mut().for_each(|x| *x = 1.0);
            v.iter_mut().for_each(|x| *x = 1.0);
            since_absorb = 0;
        }
        if iter % CHECK_EVERY == 0 || iter == max_iter {
            residual = 0.0;
            for i in 0..n {
                let row = &kernel[i * m..(i + 1) * m];
                let s: f64 = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
                residual += (u[i] * s - a[i]).abs();
            }
            if residual <= tol {
                for i in 0..n {
                    alpha[i] += u[i].ln();
                }
                for j in 0..m {
                    beta[j] += v[j].ln();
                }
                return Ok(LogScaling {
                    alpha,
                    beta,
                    iterations: iter,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
        detail: "sinkhorn marginal residual".into(),
    })
}

/// Dense plan `exp(alpha_i + beta_j + logk_ij)`.
pub(crate) fn plan(logk: &[f64], scaling: &LogScaling) -> Vec<f64> {
    let m = scaling.beta.len();
    let mut out = vec![0.0; logk.len()];
    absorbed_kernel(logk, &scaling.alpha, &scaling.beta, &mut out);
    debug_assert_eq!(out.len(), scaling.alpha.len() * m);
    out
}

/// Entropic transport on dense costs between positive marginals.
#[derive(Debug, Clone)]
pub(crate) struct EntropicSolution {
    pub plan: Vec<f64>,
    /// `<C, pi>`.
    pub transport_cost: f64,
    /// `min <C, pi> + eps KL(pi | a x b)`, evaluated as `<a, f> + <b, g>`.
    pub value: f64,
    pub iterations: usize,
}

pub(crate) fn entropic(
    a: &[f64],
    b: &[f64],
    cost: &[f64],
    eps: f64,
    eps_scaling: bool,
    tol: f64,
    max_iter: usize,
) -> Result<EntropicSolution> {
    let (n, m) = (a.len(), b.len());
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    if eps_scaling {
        let mut e = max_cost.max(eps);
        while e > eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(eps);
    let log_ab: Vec<f64> = (0..n * m).map(|k| a[k / m].ln() + b[k % m].ln()).collect();
    let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut total_iter = 0;
    let mut last = None;
    let mut prev_eps = schedule[0];
    for (stage, &e) in schedule.iter().enumerate() {
        let logk: Vec<f64> = cost.iter().zip(&log_ab).map(|(c, l)| l - c / e).collect();
        let w = warm.take().map(|(al, be): (Vec<f64>, Vec<f64>)| {
            let r = prev_eps / e;
            (al.iter().map(|x| x * r).collect(), be.iter().map(|x| x * r).collect())
        });
        let final_stage = stage + 1 == schedule.len();
        let stage_tol = if final_stage { tol } else { tol.max(1e-4) };
        let sol = solve_log(a, b, &logk, w, stage_tol, max_iter.saturating_sub(total_iter).max(1))?;
        total_iter += sol.iterations;
        warm = Some((sol.alpha.clone(), sol.beta.clone()));
        prev_eps = e;
        last = Some((sol, logk));
    }
    let (sol, logk) = last.expect("at least one stage");
    let plan = plan(&logk, &sol);
    let transport_cost = plan.iter().zip(cost).map(|(p, c)| p * c).sum();
    let value = eps * (a.iter().zip(&sol.alpha).map(|(x, al)| x * al).sum::<f64>()
        + b.iter().zip(&sol.beta).map(|(x, be)| x * be).sum::<f64>());
    Ok(EntropicSolution {
        plan,
        transport_cost,
        value,
        iterations: total_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_closed_form() {
        // symmetric 2x2 problem: pi_01 = pi_10 = x with x/(1/2 - x) = e^{-1/eps}
        let a = [0.5, 0.5];
        let cost = [0.0, 1.0, 1.0, 0.0];
        let eps = 0.3;
        let sol = entropic(&a, &a, &cost, eps, false, 1e-13, 10_000).unwrap();
        let r = (-1.0 / eps).exp();
        let x = 0.5 * r / (1.0 + r);
        assert!((sol.plan[1] - x).abs() < 1e-12);
        assert!((sol.transport_cost - 2.0 * x).abs() < 1e-12);
    }

    #[test]
    fn tiny_eps_survives_underflow() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.5, 0.3, 0.2];
        let x = [0.0_f64, 1.0, 2.0];
        let cost: Vec<f64> = (0..9).map(|k| (x[k / 3] - x[k % 3]).powi(2)).collect();
        let sol = entropic(&a, &b, &cost, 1e-4, true, 1e-10, 100_000).unwrap();
        // monotone coupling moves 0.3 by one cell twice
        assert!((sol.transport_cost - 0.6).abs() < 1e-3);
        for i in 0..3 {
            let row: f64 = sol.plan[i * 3..i * 3 + 3].iter().sum();
            assert!((row - a[i]).abs() <= 1e-9);
        }
        for v in &sol.plan {
            assert!(v.is_finite() && *v >= 0.0);
        }
    }
}
