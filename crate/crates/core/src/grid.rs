//! Regular grids on boxes, the density and field types living on them, and
//! discrete calculus.
//!
//! Cells are ordered row-major with the x index fastest. Edges join cells
//! that share a face; there are no edges across the box boundary, which is
//! the discrete no-flux condition. Conventions used throughout:
//!
//! * masses are per cell and sum to one; density value = mass / cell volume;
//! * `gradient` maps a cell field to edge differences `(f_to - f_from) / h`;
//! * `divergence` maps an edge momentum field to a signed measure (mass
//!   units) and is the negative adjoint of `gradient` for the pairings
//!   `<s, f> = sum_i s_i f_i` and `<m, g> = sum_e m_e g_e * vol`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`GridDensity`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Tolerance on the total of a [`GridSignedMeasure`], relative to its l1 norm.
pub const BALANCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub axis: usize,
}

/// Regular grid on a box in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lower: [f64; 2],
    upper: [f64; 2],
    n: [usize; 2],
    h: [f64; 2],
    edges: Vec<Edge>,
}

impl Grid {
    pub fn new(dim: usize, lower: &[f64], upper: &[f64], n: &[usize]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in {{1, 2}}")));
        }
        if lower.len() != dim || upper.len() != dim || n.len() != dim {
            return Err(Error::InvalidGrid("bounds and counts must match the dimension".into()));
        }
        let mut lo = [0.0, 0.0];
        let mut hi = [1.0, 1.0];
        let mut nn = [1, 1];
        let mut h = [1.0, 1.0];
        for k in 0..dim {
            if n[k] < 2 {
                return Err(Error::InvalidGrid(format!("axis {k} has {} cells, need >= 2", n[k])));
            }
            if !(upper[k] > lower[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} interval [{}, {}] is empty",
                    lower[k], upper[k]
                )));
            }
            lo[k] = lower[k];
            hi[k] = upper[k];
            nn[k] = n[k];
            h[k] = (upper[k] - lower[k]) / n[k] as f64;
        }
        let mut edges = Vec::new();
        for iy in 0..nn[1] {
            for ix in 0..nn[0] {
                let i = ix + nn[0] * iy;
                if ix + 1 < nn[0] {
                    edges.push(Edge { from: i, to: i + 1, axis: 0 });
                }
                if dim == 2 && iy + 1 < nn[1] {
                    edges.push(Edge { from: i, to: i + nn[0], axis: 1 });
                }
            }
        }
        Ok(Self {
            dim,
            lower: lo,
            upper: hi,
            n: nn,
            h,
            edges,
        })
    }

    pub fn new_1d(lower: f64, upper: f64, n: usize) -> Result<Self> {
        Self::new(1, &[lower], &[upper], &[n])
    }

    pub fn new_2d(lower: [f64; 2], upper: [f64; 2], n: [usize; 2]) -> Result<Self> {
        Self::new(2, &lower, &upper, &n)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.h[axis]
    }

    pub fn min_spacing(&self) -> f64 {
        self.h[..self.dim].iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower[..self.dim]
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper[..self.dim]
    }

    pub fn cell_volume(&self) -> f64 {
        self.h[..self.dim].iter().product()
    }

    pub fn box_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.upper[k] - self.lower[k]).product()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Distance between the highest and lowest index coupled by an edge.
    pub fn bandwidth(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.n[0]
        }
    }

    pub fn cell_index(&self, idx: &[usize]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] + self.n[0] * idx[1]
        }
    }

    pub fn cell_multi_index(&self, i: usize) -> [usize; 2] {
        [i % self.n[0], i / self.n[0]]
    }

    /// Cell center; the unused second coordinate is 0 in 1D.
    pub fn cell_center(&self, i: usize) -> [f64; 2] {
        let [ix, iy] = self.cell_multi_index(i);
        let x = self.lower[0] + (ix as f64 + 0.5) * self.h[0];
        let y = if self.dim == 2 {
            self.lower[1] + (iy as f64 + 0.5) * self.h[1]
        } else {
            0.0
        };
        [x, y]
    }

    pub fn cell_centers(&self) -> Vec<[f64; 2]> {
        (0..self.n_cells()).map(|i| self.cell_center(i)).collect()
    }

    /// Cell containing `x`; points outside the box are clipped to boundary cells.
    /// The flag reports whether clipping happened.
    pub fn locate(&self, x: &[f64]) -> (usize, bool) {
        let mut idx = [0usize; 2];
        let mut clipped = false;
        for k in 0..self.dim {
            let t = (x[k] - self.lower[k]) / self.h[k];
            let mut c = t.floor();
            if c < 0.0 {
                c = 0.0;
                clipped = true;
            } else if c >= self.n[k] as f64 {
                c = (self.n[k] - 1) as f64;
                // the closed upper face belongs to the last cell
                if x[k] > self.upper[k] {
                    clipped = true;
                }
            }
            idx[k] = c as usize;
        }
        (self.cell_index(&idx[..self.dim]), clipped)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        std::ptr::eq(self, other) || self == other
    }

    pub(crate) fn check(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(what.to_string()))
        }
    }
}

/// Analytic potential, evaluable off the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticPotential {
    /// `lambda/2 * |x|^2`, exactly lambda-convex.
    Quadratic { lambda: f64 },
    /// `sum_k a x_k^4 - b x_k^2`, with declared convexity modulus `-2b`.
    DoubleWell { a: f64, b: f64 },
    /// Zero potential (pure heat flow).
    Flat,
}

impl AnalyticPotential {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            AnalyticPotential::Quadratic { lambda } => 0.5 * lambda * x.iter().map(|v| v * v).sum::<f64>(),
            AnalyticPotential::DoubleWell { a, b } => x.iter().map(|v| a * v.powi(4) - b * v * v).sum(),
            AnalyticPotential::Flat => 0.0,
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(x.len()) {
            *o = match *self {
                AnalyticPotential::Quadratic { lambda } => lambda * x[k],
                AnalyticPotential::DoubleWell { a, b } => 4.0 * a * x[k].powi(3) - 2.0 * b * x[k],
                AnalyticPotential::Flat => 0.0,
            };
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            AnalyticPotential::Quadratic { lambda } => lambda,
            AnalyticPotential::DoubleWell { b, .. } => -2.0 * b,
            AnalyticPotential::Flat => 0.0,
        }
    }
}

/// Potential sampled at cell centers with its Gibbs weights.
#[derive(Debug, Clone)]
pub struct Potential {
    grid: Arc<Grid>,
    psi: Vec<f64>,
    lambda: f64,
    gibbs: Vec<f64>,
    gibbs_mass: f64,
    analytic: Option<AnalyticPotential>,
}

impl Potential {
    /// Potential from per-cell values and a convexity modulus the caller vouches for.
    pub fn from_values(grid: Arc<Grid>, psi: Vec<f64>, lambda: f64) -> Result<Self> {
        if psi.len() != grid.n_cells() {
            return Err(Error::GridMismatch("potential length".into()));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("potential must be finite".into()));
        }
        let gibbs: Vec<f64> = psi.iter().map(|p| (-p).exp()).collect();
        let gibbs_mass = gibbs.iter().sum::<f64>() * grid.cell_volume();
        Ok(Self {
            grid,
            psi,
            lambda,
            gibbs,
            gibbs_mass,
            analytic: None,
        })
    }

    pub fn sample(grid: Arc<Grid>, analytic: AnalyticPotential) -> Result<Self> {
        let d = grid.dim();
        let psi = (0..grid.n_cells())
            .map(|i| analytic.value(&grid.cell_center(i)[..d]))
            .collect();
        let mut pot = Self::from_values(grid, psi, analytic.lambda())?;
        pot.analytic = Some(analytic);
        Ok(pot)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gibbs(&self) -> &[f64] {
        &self.gibbs
    }

    pub fn gibbs_mass(&self) -> f64 {
        self.gibbs_mass
    }

    pub fn analytic(&self) -> Option<AnalyticPotential> {
        self.analytic
    }

    /// The normalized discrete Gibbs measure `e^{-psi} / Z`.
    pub fn gibbs_density(&self) -> GridDensity {
        let total: f64 = self.gibbs.iter().sum();
        GridDensity {
            grid: self.grid.clone(),
            masses: self.gibbs.iter().map(|g| g / total).collect(),
        }
    }
}

/// Probability vector on the cells of a grid.
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Arc<Grid>,
    masses: Vec<f64>,
}

impl PartialEq for GridDensity {
    fn eq(&self, other: &Self) -> bool {
        self.grid.same_as(&other.grid) && self.masses == other.masses
    }
}

impl GridDensity {
    /// Validating constructor: masses nonnegative and summing to one.
    pub fn new(grid: Arc<Grid>, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} masses for {} cells",
                masses.len(),
                grid.n_cells()
            )));
        }
        if let Some(i) = masses.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidDensity(format!("mass {} at cell {i}", masses[i])));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDensity(format!("total mass {total}")));
        }
        Ok(Self { grid, masses })
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn from_weights(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.n_cells() {
            return Err(Error::GridMismatch("weights length".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidDensity("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDensity("weights sum to zero".into()));
        }
        Ok(Self {
            grid,
            masses: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(grid: Arc<Grid>) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            masses: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(grid: Arc<Grid>, cell: usize) -> Result<Self> {
        if cell >= grid.n_cells() {
            return Err(Error::InvalidArgument(format!("cell {cell} out of range")));
        }
        let mut masses = vec![0.0; grid.n_cells()];
        masses[cell] = 1.0;
        Ok(Self { grid, masses })
    }

    /// Cell averages of an isotropic Gaussian `N(mean, var I)`, conditioned on the box.
    pub fn gaussian(grid: Arc<Grid>, mean: &[f64], var: f64) -> Result<Self> {
        if mean.len() != grid.dim() {
            return Err(Error::InvalidArgument("mean dimension".into()));
        }
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!("variance {var} must be positive")));
        }
        let sd = var.sqrt();
        let axis_masses: Vec<Vec<f64>> = (0..grid.dim())
            .map(|k| {
                let h = grid.spacing(k);
                let lo = grid.lower()[k];
                (0..grid.cells_per_axis()[k])
                    .map(|c| {
                        let a = lo + c as f64 * h;
                        gaussian_interval_mass(a, a + h, mean[k], sd)
                    })
                    .collect()
            })
            .collect();
        let weights = (0..grid.n_cells())
            .map(|i| {
                let [ix, iy] = grid.cell_multi_index(i);
                let mut w = axis_masses[0][ix];
                if grid.dim() == 2 {
                    w *= axis_masses[1][iy];
                }
                w
            })
            .collect();
        Self::from_weights(grid, weights)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Density value (mass per unit volume) at each cell.
    pub fn density_values(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        self.masses.iter().map(|m| m / vol).collect()
    }

    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0, 0.0];
        for (i, &p) in self.masses.iter().enumerate() {
            let c = self.grid.cell_center(i);
            m[0] += p * c[0];
            m[1] += p * c[1];
        }
        m
    }

    /// Per-axis variance of the cell-centered atoms.
    pub fn variance(&self) -> [f64; 2] {
        let m = self.mean();
        let mut v = [0.0, 0.0];
        for (i, &p) in self.masses.iter().enumerate() {
            let c = self.grid.cell_center(i);
            v[0] += p * (c[0] - m[0]).powi(2);
            v[1] += p * (c[1] - m[1]).powi(2);
        }
        v
    }

    /// Variance of the piecewise-constant reconstruction (atoms plus h^2/12).
    pub fn variance_piecewise(&self) -> [f64; 2] {
        let mut v = self.variance();
        v[0] += self.grid.spacing(0).powi(2) / 12.0;
        if self.grid.dim() == 2 {
            v[1] += self.grid.spacing(1).powi(2) / 12.0;
        }
        v
    }

    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum()
    }

    /// `(1 - t) self + t other`, the linear (mixture) interpolation.
    pub fn mix(&self, other: &GridDensity, t: f64) -> Result<GridDensity> {
        self.grid.check(&other.grid, "mix")?;
        Ok(GridDensity {
            grid: self.grid.clone(),
            masses: self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        })
    }

    /// Mass in the outermost ring of cells.
    pub fn boundary_mass(&self) -> f64 {
        let n = self.grid.cells_per_axis().to_vec();
        self.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let idx = self.grid.cell_multi_index(*i);
                (0..self.grid.dim()).any(|k| idx[k] == 0 || idx[k] + 1 == n[k])
            })
            .map(|(_, m)| m)
            .sum()
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<Grid>, masses: Vec<f64>) -> Self {
        Self { grid, masses }
    }

    /// CSV rows `cell,x[,y],mass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.grid.dim() == 1 {
            out.push_str("cell,x,mass\n");
        } else {
            out.push_str("cell,x,y,mass\n");
        }
        for (i, m) in self.masses.iter().enumerate() {
            let c = self.grid.cell_center(i);
            if self.grid.dim() == 1 {
                let _ = writeln!(out, "{i},{},{:e}", c[0], m);
            } else {
                let _ = writeln!(out, "{i},{},{},{:e}", c[0], c[1], m);
            }
        }
        out
    }

    /// Reads the [`to_csv`](Self::to_csv) format; masses are renormalized.
    pub fn from_csv(grid: Arc<Grid>, text: &str) -> Result<Self> {
        let mut weights = vec![f64::NAN; grid.n_cells()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || lineno == 0 && line.starts_with("cell") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != grid.dim() + 2 {
                return Err(Error::InvalidDensity(format!("line {}: expected {} fields", lineno + 1, grid.dim() + 2)));
            }
            let cell: usize = fields[0]
                .parse()
                .map_err(|_| Error::InvalidDensity(format!("line {}: bad cell index", lineno + 1)))?;
            let mass: f64 = fields[fields.len() - 1]
                .parse()
                .map_err(|_| Error::InvalidDensity(format!("line {}: bad mass", lineno + 1)))?;
            if cell >= weights.len() {
                return Err(Error::InvalidDensity(format!("line {}: cell {cell} out of range", lineno + 1)));
            }
            weights[cell] = mass;
        }
        if let Some(i) = weights.iter().position(|w| w.is_nan()) {
            return Err(Error::InvalidDensity(format!("cell {i} missing")));
        }
        Self::from_weights(grid, weights)
    }

    pub fn read_csv(grid: Arc<Grid>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(grid, &text)
    }
}

/// Mass of `N(mean, sd^2)` on `[a, b]`, accurate in the tails.
pub(crate) fn gaussian_interval_mass(a: f64, b: f64, mean: f64, sd: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 * sd;
    let za = (a - mean) / s;
    let zb = (b - mean) / s;
    if za >= 0.0 {
        0.5 * (erfc(za) - erfc(zb))
    } else if zb <= 0.0 {
        0.5 * (erfc(-zb) - erfc(-za))
    } else {
        1.0 - 0.5 * (erfc(-za) + erfc(zb))
    }
}

/// Zero-sum signed measure on cells (mass units).
#[derive(Debug, Clone)]
pub struct GridSignedMeasure {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridSignedMeasure {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch("measure length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("measure must be finite".into()));
        }
        let total: f64 = values.iter().sum();
        let scale: f64 = values.iter().map(|v| v.abs()).sum();
        if total.abs() > BALANCE_TOLERANCE * scale.max(1.0) {
            return Err(Error::InvalidArgument(format!("signed measure total {total:e} is not zero")));
        }
        Ok(Self { grid, values })
    }

    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// `b - a` for two densities.
    pub fn difference(a: &GridDensity, b: &GridDensity) -> Result<Self> {
        a.grid().check(b.grid(), "difference")?;
        Ok(Self {
            grid: a.grid().clone(),
            values: b.masses().iter().zip(a.masses()).map(|(x, y)| x - y).collect(),
        })
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &Self, alpha: f64) -> Result<Self> {
        self.grid.check(&other.grid, "add")?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + alpha * b).collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Values on grid edges (momentum or velocity units).
#[derive(Debug, Clone)]
pub struct EdgeField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_edges() {
            return Err(Error::GridMismatch("edge field length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("edge field must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.n_edges();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Edge inner product `sum_e a_e b_e * vol`.
    pub fn inner(&self, other: &EdgeField) -> f64 {
        let vol = self.grid.cell_volume();
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * vol
    }
}

/// Discrete gradient `(f_to - f_from) / h_axis` of a per-cell field.
pub fn gradient(f: &[f64], grid: &Arc<Grid>) -> Result<EdgeField> {
    if f.len() != grid.n_cells() {
        return Err(Error::GridMismatch(format!("field has {} entries, grid {}", f.len(), grid.n_cells())));
    }
    let values = grid
        .edges()
        .iter()
        .map(|e| (f[e.to] - f[e.from]) / grid.spacing(e.axis))
        .collect();
    EdgeField::new(grid.clone(), values)
}

/// Discrete divergence of a momentum field, as a signed measure in mass units.
pub fn divergence(m: &EdgeField, grid: &Arc<Grid>) -> Result<GridSignedMeasure> {
    m.grid().check(grid, "divergence")?;
    let vol = grid.cell_volume();
    let mut out = vec![0.0; grid.n_cells()];
    for (e, &v) in grid.edges().iter().zip(m.values()) {
        let q = v * vol / grid.spacing(e.axis);
        out[e.from] += q;
        out[e.to] -= q;
    }
    Ok(GridSignedMeasure::from_parts_unchecked(grid.clone(), out))
}

/// Edge densities `theta_e = (rho_i + rho_j) / 2` (arithmetic mean of density values).
pub fn edge_density(rho: &GridDensity) -> Vec<f64> {
    let vol = rho.grid().cell_volume();
    let p = rho.masses();
    rho.grid()
        .edges()
        .iter()
        .map(|e| 0.5 * (p[e.from] + p[e.to]) / vol)
        .collect()
}

/// The density-weighted Laplacian `L f = -div(theta ⊙ grad f)`.
///
/// As a matrix it is the graph Laplacian with edge weights
/// `theta_e * vol / h_e^2`.
#[derive(Debug, Clone)]
pub struct WeightedLaplacian {
    grid: Arc<Grid>,
    weights: Vec<f64>,
    priority: Vec<f64>,
}

pub fn weighted_laplacian(rho: &GridDensity) -> WeightedLaplacian {
    let grid = rho.grid().clone();
    let vol = grid.cell_volume();
    let weights = edge_density(rho)
        .iter()
        .zip(grid.edges())
        .map(|(t, e)| t * vol / grid.spacing(e.axis).powi(2))
        .collect();
    WeightedLaplacian {
        grid,
        weights,
        priority: rho.masses().to_vec(),
    }
}

impl WeightedLaplacian {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Graph weights `theta_e * vol / h_e^2`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_cells()];
        for (e, &w) in self.grid.edges().iter().zip(&self.weights) {
            let d = w * (f[e.from] - f[e.to]);
            out[e.from] += d;
            out[e.to] -= d;
        }
        out
    }

    /// Quadratic form `f^T L f`.
    pub fn energy(&self, f: &[f64]) -> f64 {
        self.grid
            .edges()
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| w * (f[e.from] - f[e.to]).powi(2))
            .sum()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.grid.n_cells();
        let mut a = vec![vec![0.0; n]; n];
        for (e, &w) in self.grid.edges().iter().zip(&self.weights) {
            a[e.from][e.from] += w;
            a[e.to][e.to] += w;
            a[e.from][e.to] -= w;
            a[e.to][e.from] -= w;
        }
        a
    }

    pub fn solver(&self) -> Result<crate::linalg::LaplacianSolver> {
        let edges = self
            .grid
            .edges()
            .iter()
            .zip(&self.weights)
            .map(|(e, &w)| (e.from, e.to, w))
            .collect();
        crate::linalg::LaplacianSolver::new(self.grid.n_cells(), self.grid.bandwidth(), edges, &self.priority)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new_1d(0.0, n as f64 * 0.5, n).unwrap())
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new_1d(0.0, 1.0, 1).is_err());
        assert!(Grid::new_1d(1.0, 1.0, 4).is_err());
        assert!(Grid::new(3, &[0.0; 3], &[1.0; 3], &[2; 3]).is_err());
        let g = Grid::new_2d([0.0, 0.0], [2.0, 1.0], [4, 2]).unwrap();
        assert_eq!(g.n_cells(), 8);
        assert_eq!(g.n_edges(), 3 * 2 + 4);
        assert!((g.cell_volume() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = grid1(6);
        let m = gradient(&[3.0; 6], &g).unwrap();
        assert!(m.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_of_coordinate_is_one() {
        let g = grid1(7);
        let x: Vec<f64> = (0..7).map(|i| g.cell_center(i)[0]).collect();
        let m = gradient(&x, &g).unwrap();
        assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn gradient_matches_hand_differences() {
        let g = Arc::new(Grid::new_1d(0.0, 2.0, 4).unwrap());
        let f = [0.3, -1.2, 2.5, 0.0];
        let m = gradient(&f, &g).unwrap();
        let expected = [(-1.2 - 0.3) / 0.5, (2.5 + 1.2) / 0.5, (0.0 - 2.5) / 0.5];
        for (a, b) in m.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_rejects_wrong_length() {
        let g = grid1(4);
        assert!(matches!(gradient(&[1.0; 3], &g), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn single_edge_flow_divergence() {
        let g = Arc::new(Grid::new_1d(0.0, 1.5, 3).unwrap());
        let m = EdgeField::new(g.clone(), vec![1.0, 0.0]).unwrap();
        let s = divergence(&m, &g).unwrap();
        let h = 0.5;
        let vol = 0.5;
        let expected = [vol / h, -vol / h, 0.0];
        for (a, b) in s.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = divergence(&EdgeField::zero(g.clone()), &g).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn divergence_rejects_foreign_grid() {
        let g = grid1(4);
        let other = grid1(5);
        assert!(divergence(&EdgeField::zero(other), &g).is_err());
    }

    #[test]
    fn laplacian_hand_assembled_three_cells() {
        let g = Arc::new(Grid::new_1d(0.0, 3.0, 3).unwrap());
        let rho = GridDensity::new(g, vec![0.5, 0.25, 0.25]).unwrap();
        let l = weighted_laplacian(&rho).dense();
        // h = vol = 1: weights (p_i + p_j) / 2
        let w01 = 0.375;
        let w12 = 0.25;
        let expected = [
            [w01, -w01, 0.0],
            [-w01, w01 + w12, -w12],
            [0.0, -w12, w12],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((l[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_uniform_is_scaled_graph_laplacian() {
        let g = Arc::new(Grid::new_1d(0.0, 2.0, 4).unwrap());
        let rho = GridDensity::uniform(g.clone());
        let l = weighted_laplacian(&rho);
        let density = 0.25 / 0.5;
        for w in l.weights() {
            assert!((w - density * 0.5 / 0.25).abs() < 1e-15);
        }
        assert!(l.apply(&[2.0; 4]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn density_constructors() {
        let g = grid1(8);
        assert!(GridDensity::new(g.clone(), vec![0.125; 8]).is_ok());
        assert!(GridDensity::new(g.clone(), vec![0.1; 8]).is_err());
        let mut bad = vec![0.125; 8];
        bad[0] = -0.01;
        bad[1] = 0.135;
        assert!(GridDensity::new(g.clone(), bad).is_err());
        let gauss = GridDensity::gaussian(g.clone(), &[2.0], 0.5).unwrap();
        assert!((gauss.masses().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((gauss.mean()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn signed_measure_requires_balance() {
        let g = grid1(3);
        assert!(GridSignedMeasure::new(g.clone(), vec![1.0, -1.0, 0.0]).is_ok());
        assert!(GridSignedMeasure::new(g, vec![1.0, -0.5, 0.0]).is_err());
    }

    #[test]
    fn csv_roundtrip_preserves_masses() {
        let g = Arc::new(Grid::new_2d([-1.0, -1.0], [1.0, 1.0], [3, 4]).unwrap());
        let rho = GridDensity::gaussian(g.clone(), &[0.1, -0.2], 0.3).unwrap();
        let back = GridDensity::from_csv(g, &rho.to_csv()).unwrap();
        for (a, b) in rho.masses().iter().zip(back.masses()) {
            assert!((a - b).abs() <= 1e-15 * a.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn locate_clips_outside_points() {
        let g = Grid::new_1d(0.0, 1.0, 4).unwrap();
        assert_eq!(g.locate(&[0.3]), (1, false));
        assert_eq!(g.locate(&[-0.1]), (0, true));
        assert_eq!(g.locate(&[1.0]), (3, false));
        assert_eq!(g.locate(&[1.2]), (3, true));
    }

    #[test]
    fn gibbs_weights_are_exact_exponentials() {
        let g = grid1(5);
        let pot = Potential::sample(g.clone(), AnalyticPotential::Quadratic { lambda: 1.0 }).unwrap();
        for (w, p) in pot.gibbs().iter().zip(pot.psi()) {
            assert_eq!(*w, (-p).exp());
        }
        let z: f64 = pot.gibbs().iter().sum::<f64>() * g.cell_volume();
        assert!((pot.gibbs_mass() - z).abs() < 1e-15);
    }
}
