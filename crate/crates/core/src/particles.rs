//! Euler-Maruyama particles for `dX = -grad Psi dt + sqrt(2) dW` and their
//! empirical measures.
//!
//! Noise comes from ChaCha8 streams indexed by `(epoch, chunk)`: every call
//! to [`simulate`] advances the epoch and every block of [`CHUNK`] particles
//! owns a stream, so results do not depend on the thread count.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{AnalyticPotential, Grid, GridDensity};
use crate::semigroup::FPOperator;
use crate::static_ot::w2_squared;

/// Particles per noise stream.
pub const CHUNK: usize = 1024;

pub const REPORT_CSV_HEADER: &str = "n,mean_w2,std_w2,ratio";

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    /// Row-major, `dim` coordinates per particle.
    positions: Vec<f64>,
    rng_seed: u64,
    epoch: u64,
    time: f64,
}

pub(crate) fn noise_stream(seed: u64, epoch: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | chunk as u64);
    rng
}

impl ParticleEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>, rng_seed: u64) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidArgument(format!("dimension {dim} not in {{1, 2}}")));
        }
        if positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("need at least one particle with full coordinates".into()));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("positions must be finite".into()));
        }
        Ok(Self {
            dim,
            positions,
            rng_seed,
            epoch: 0,
            time: 0.0,
        })
    }

    /// `n` i.i.d. draws from the piecewise-constant density, or from its
    /// cell masses placed at cell centers. Uses epoch 0 of the seed; the
    /// dynamics start at epoch 1.
    pub fn sample(rho: &GridDensity, n: usize, rng_seed: u64, at_centers: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one particle".into()));
        }
        let grid = rho.grid();
        let dim = grid.dim();
        let mut cdf = Vec::with_capacity(rho.len());
        let mut acc = 0.0;
        for m in rho.masses() {
            acc += m;
            cdf.push(acc);
        }
        let positions: Vec<f64> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = noise_stream(rng_seed, 0, c);
                let count = CHUNK.min(n - c * CHUNK);
                let cdf = &cdf;
                (0..count).flat_map(move |_| {
                    let u: f64 = rng.random::<f64>() * acc;
                    let cell = cdf.partition_point(|v| *v <= u).min(cdf.len() - 1);
                    let center = grid.cell_center(cell);
                    let mut p = [0.0; 2];
                    for k in 0..dim {
                        let jitter = if at_centers { 0.0 } else { rng.random::<f64>() - 0.5 };
                        p[k] = center[k] + jitter * grid.spacing(k);
                    }
                    p.into_iter().take(dim).collect::<Vec<_>>()
                })
            })
            .collect();
        let mut e = Self::new(dim, positions, rng_seed)?;
        e.epoch = 1;
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Sample mean and (biased) variance along `axis`.
    pub fn moments(&self, axis: usize) -> (f64, f64) {
        let xs = self.positions.iter().skip(axis).step_by(self.dim);
        let n = self.len() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    /// `index,x[,y]` per particle.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.dim == 1 { "index,x\n" } else { "index,x,y\n" });
        for (i, p) in self.positions.chunks(self.dim).enumerate() {
            out.push_str(&i.to_string());
            for x in p {
                out.push(',');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        out
    }
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    // a single step rarely crosses more than once; fold until inside
    let width = hi - lo;
    let period = 2.0 * width;
    if x < lo || x > hi {
        let mut r = (x - lo).rem_euclid(period);
        if r > width {
            r = period - r;
        }
        x = lo + r;
    }
    x.clamp(lo, hi)
}

/// Euler-Maruyama up to time `t` with `ceil(t / dt)` equal steps, reflected at the box.
pub fn simulate(
    ensemble: &ParticleEnsemble,
    potential: &AnalyticPotential,
    domain: &Grid,
    t: f64,
    dt: f64,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0 && dt.is_finite() && t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("need t >= 0 and dt > 0, got t {t}, dt {dt}")));
    }
    if domain.dim() != ensemble.dim {
        return Err(Error::GridMismatch("ensemble and domain dimension".into()));
    }
    if t == 0.0 {
        return Ok(ensemble.clone());
    }
    let steps = (t / dt).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let amp = (2.0 * h).sqrt();
    let dim = ensemble.dim;
    let (lo, hi) = (domain.lower().to_vec(), domain.upper().to_vec());
    let mut positions = ensemble.positions.clone();
    positions.par_chunks_mut(CHUNK * dim).enumerate().for_each(|(c, block)| {
        let mut rng = noise_stream(ensemble.rng_seed, ensemble.epoch, c);
        let mut grad = [0.0; 2];
        for _ in 0..steps {
            for p in block.chunks_mut(dim) {
                potential.gradient(p, &mut grad[..dim]);
                for k in 0..dim {
                    let xi: f64 = rng.sample(StandardNormal);
                    p[k] = reflect(p[k] - grad[k] * h + amp * xi, lo[k], hi[k]);
                }
            }
        }
    });
    Ok(ParticleEnsemble {
        dim,
        positions,
        rng_seed: ensemble.rng_seed,
        epoch: ensemble.epoch + 1,
        time: ensemble.time + t,
    })
}

/// Histogram of the particles.
#[derive(Debug, Clone)]
pub struct EmpiricalDensity {
    pub density: GridDensity,
    /// Particles outside the box, counted into boundary cells.
    pub clipped: usize,
}

pub fn empirical_density(ensemble: &ParticleEnsemble, grid: &Arc<Grid>) -> Result<EmpiricalDensity> {
    if grid.dim() != ensemble.dim {
        return Err(Error::GridMismatch("ensemble and grid dimension".into()));
    }
    let mut counts = vec![0u64; grid.n_cells()];
    let mut clipped = 0;
    for p in ensemble.positions.chunks(ensemble.dim) {
        let (cell, outside) = grid.locate(p);
        counts[cell] += 1;
        if outside {
            clipped += 1;
        }
    }
    let n = ensemble.len() as f64;
    let masses = counts.iter().map(|c| *c as f64 / n).collect();
    Ok(EmpiricalDensity {
        density: GridDensity::from_weights(grid.clone(), masses)?,
        clipped,
    })
}

#[derive(Debug, Clone)]
pub struct ConvergenceConfig {
    pub rho0: GridDensity,
    pub potential: AnalyticPotential,
    pub op: FPOperator,
    pub t: f64,
    pub dt: f64,
    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    /// Start particles at cell centers instead of uniformly within cells.
    pub at_centers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean_w2: f64,
    pub std_w2: f64,
    /// `mean_w2` of the previous row over this one; `n^{-1/2}` predicts `sqrt(10)` per decade.
    pub ratio: Option<f64>,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Each row's mean distance is below the previous row's.
    pub fn decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_w2 < w[0].mean_w2)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let ratio = r.ratio.map_or(String::new(), |v| format!("{v:?}"));
            out.push_str(&format!("{},{:?},{:?},{}\n", r.n, r.mean_w2, r.std_w2, ratio));
        }
        out
    }
}

/// `W2(empirical_t, P_t rho0)` averaged over seeds, for each ensemble size.
pub fn empirical_convergence_report(config: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let grid = config.rho0.grid().clone();
    let target = config.op.evolve(&config.rho0, config.t)?;
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for &n in &config.sizes {
        let per_seed = (0..config.seeds)
            .map(|s| {
                let seed = config.base_seed.wrapping_add(s as u64);
                let e = ParticleEnsemble::sample(&config.rho0, n, seed, config.at_centers)?;
                let e = simulate(&e, &config.potential, &grid, config.t, config.dt)?;
                let emp = empirical_density(&e, &grid)?;
                Ok(w2_squared(&emp.density, &target)?.sqrt())
            })
            .collect::<Result<Vec<f64>>>()?;
        let k = per_seed.len().max(1) as f64;
        let mean_w2 = per_seed.iter().sum::<f64>() / k;
        let std_w2 = (per_seed.iter().map(|d| (d - mean_w2).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
        let ratio = rows.last().map(|r| r.mean_w2 / mean_w2);
        rows.push(ConvergenceRow {
            n,
            mean_w2,
            std_w2,
            ratio,
            per_seed,
        });
    }
    Ok(ConvergenceReport { rows })
}
