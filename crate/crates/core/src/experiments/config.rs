//! Flat sectioned key-value configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key has a default in [`SCHEMA`]; keys outside it are rejected.
//! Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{AnalyticPotential, Grid, GridDensity, Potential};
use crate::semigroup::{assemble_generator, FPOperator};

/// `(section, key, default, meaning)`.
pub const SCHEMA: &[(&str, &str, &str, &str)] = &[
    ("run", "testcase", "ou", "label echoed into the manifest"),
    ("run", "seed", "0", "base seed; --seed overrides"),
    ("grid", "dim", "1", "1 or 2"),
    ("grid", "lower", "-6", "lower box corner, one value per axis"),
    ("grid", "upper", "6", "upper box corner, one value per axis"),
    ("grid", "cells", "256", "cells per axis, one value per axis"),
    ("potential", "kind", "quadratic", "quadratic | double_well | flat"),
    ("potential", "lambda", "1", "quadratic: lambda |x|^2 / 2"),
    ("potential", "a", "0.25", "double_well: a x^4 - b x^2 per axis"),
    ("potential", "b", "0.5", "double_well: a x^4 - b x^2 per axis"),
    ("semigroup", "dt_max", "1e-3", "largest implicit Euler step"),
    ("rho0", "kind", "gaussian", "gaussian | gibbs | uniform | one_hot | file"),
    ("rho0", "mean", "0", "gaussian mean, one value per axis"),
    ("rho0", "var", "0.5", "gaussian variance"),
    ("rho0", "cell", "0", "one_hot cell index"),
    ("rho0", "path", "", "file: density CSV (cell,x[,y],mass), relative to the config"),
    ("rho1", "kind", "gaussian", "gaussian | gibbs | uniform | one_hot | file"),
    ("rho1", "mean", "0.5", "gaussian mean, one value per axis"),
    ("rho1", "var", "0.3", "gaussian variance"),
    ("rho1", "cell", "0", "one_hot cell index"),
    ("rho1", "path", "", "file: density CSV (cell,x[,y],mass), relative to the config"),
    ("gamma_sweep", "taus", "0.2, 0.1, 0.05, 0.025", "time horizons, largest first"),
    ("gamma_sweep", "k_per_segment", "64", "steps per recovery-curve segment"),
    ("gamma_sweep", "record_wall_time", "false", "fill the seconds column"),
    ("gamma_sweep", "err_noise", "0.1", "allowed relative rise of |err| between horizons"),
    ("rate", "taus", "0.1, 0.2", "time horizons"),
    ("rate", "k_per_segment", "64", "steps per recovery-curve segment"),
    ("rate", "static_tolerance", "0.05", "static value vs interval midpoint, relative"),
    ("w2", "entropic_eps", "1e-2", "regularization of the entropic estimate"),
    ("w2", "geodesic_steps", "64", "time steps of the displacement interpolation"),
    ("w2", "action_tolerance", "0.02", "geodesic kinetic action vs W2^2, relative"),
    ("semigroup_suite", "times", "0.1, 0.25, 0.5, 1", "evolution times"),
    ("semigroup_suite", "eps_sweep", "0.1, 0.05, 0.025, 0.0125", "smoothing scales, decreasing"),
    ("semigroup_suite", "dissipation_steps", "16, 64", "steps of the dissipation check over unit time"),
    ("semigroup_suite", "dissipation_tau", "0.1", "time scale of the dissipation check"),
    ("jko", "t", "0.5", "horizon"),
    ("jko", "steps", "2, 4, 8, 16", "numbers of JKO steps, each doubling the last"),
    ("jko", "reference_dt_max", "1e-5", "implicit Euler step of the reference flow"),
    ("jko", "ratio_min", "1.5", "smallest accepted error ratio per doubling"),
    ("jko", "ratio_max", "3", "largest accepted error ratio per doubling"),
    ("particles", "t", "1", "horizon"),
    ("particles", "dt", "1e-3", "Euler-Maruyama step"),
    ("particles", "sizes", "100, 1000, 10000", "ensemble sizes"),
    ("particles", "seeds", "20", "ensembles per size"),
    ("particles", "at_centers", "false", "start particles at cell centers"),
    ("particles", "moment_particles", "100000", "ensemble size of the moment check, 0 to skip"),
    ("particles", "dump_ensemble", "false", "write the moment-check ensemble"),
    ("norm_check", "instances", "200", "random instances on grids up to max_cells"),
    ("norm_check", "max_cells", "64", "largest random grid"),
    ("norm_check", "oracle_instances", "40", "instances on tiny grids checked against the QP oracle"),
    ("norm_check", "oracle_max_cells", "8", "largest oracle grid"),
    ("norm_check", "tolerance", "1e-8", "dual vs flux form, relative"),
    ("norm_check", "oracle_tolerance", "1e-9", "either form vs the QP oracle, relative"),
];

/// A parsed configuration; unset keys read their schema default.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
    base_dir: PathBuf,
}

fn default_of(section: &str, key: &str) -> Option<&'static str> {
    SCHEMA
        .iter()
        .find(|(s, k, _, _)| *s == section && *k == key)
        .map(|(_, _, d, _)| *d)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header '{line}'")))?
                    .trim();
                if !SCHEMA.iter().any(|(s, ..)| *s == name) {
                    return Err(at(format!("unknown section '{name}'")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| at(format!("key '{key}' outside any section")))?;
            if default_of(sec, key).is_none() {
                return Err(at(format!("unknown key '{key}' in section [{sec}]")));
            }
            if values
                .insert((sec.to_string(), key.to_string()), value.trim().to_string())
                .is_some()
            {
                return Err(at(format!("duplicate key '{key}' in section [{sec}]")));
            }
        }
        Ok(Self {
            values,
            base_dir: PathBuf::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<()> {
        if default_of(section, key).is_none() {
            return Err(Error::Config(format!("unknown key '{key}' in section [{section}]")));
        }
        self.values.insert((section.to_string(), key.to_string()), value.into());
        Ok(())
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        match self.values.get(&(section.to_string(), key.to_string())) {
            Some(v) => v,
            None => default_of(section, key).unwrap_or_else(|| panic!("key [{section}] {key} missing from the schema")),
        }
    }

    fn bad(section: &str, key: &str, value: &str, what: &str) -> Error {
        Error::Config(format!("[{section}] {key} = '{value}': expected {what}"))
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<f64> {
        let v = self.raw(section, key);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Self::bad(section, key, v, "a finite number"))
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<usize> {
        let v = self.raw(section, key);
        v.parse().map_err(|_| Self::bad(section, key, v, "a non-negative integer"))
    }

    pub fn u64(&self, section: &str, key: &str) -> Result<u64> {
        let v = self.raw(section, key);
        v.parse().map_err(|_| Self::bad(section, key, v, "a non-negative integer"))
    }

    pub fn bool(&self, section: &str, key: &str) -> Result<bool> {
        let v = self.raw(section, key);
        v.parse().map_err(|_| Self::bad(section, key, v, "true or false"))
    }

    pub fn f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(section, key);
        v.split(',')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Self::bad(section, key, v, "a comma-separated list of numbers"))
    }

    pub fn usize_list(&self, section: &str, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(section, key);
        v.split(',')
            .map(|s| s.trim().parse::<usize>().ok())
            .collect::<Option<Vec<_>>>()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Self::bad(section, key, v, "a comma-separated list of integers"))
    }

    /// Effective configuration with defaults marked, in schema order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, _, _) in SCHEMA {
            if *s != current {
                let _ = writeln!(out, "{}[{s}]", if current.is_empty() { "" } else { "\n" });
                current = s;
            }
            let given = self.values.contains_key(&(s.to_string(), k.to_string()));
            let _ = writeln!(out, "{k} = {}{}", self.raw(s, k), if given { "" } else { "  # default" });
        }
        out
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let dim = self.usize("grid", "dim")?;
        if !(dim == 1 || dim == 2) {
            return Err(Self::bad("grid", "dim", self.raw("grid", "dim"), "1 or 2"));
        }
        let axis = |key: &str| -> Result<Vec<f64>> {
            let l = self.f64_list("grid", key)?;
            match l.len() {
                1 => Ok(vec![l[0]; dim]),
                n if n == dim => Ok(l),
                _ => Err(Self::bad("grid", key, self.raw("grid", key), "one value or one per axis")),
            }
        };
        let (lower, upper) = (axis("lower")?, axis("upper")?);
        let cells = self.usize_list("grid", "cells")?;
        let cells = match cells.len() {
            1 => vec![cells[0]; dim],
            n if n == dim => cells,
            _ => return Err(Self::bad("grid", "cells", self.raw("grid", "cells"), "one value or one per axis")),
        };
        Ok(Arc::new(Grid::new(dim, &lower, &upper, &cells)?))
    }

    pub fn analytic_potential(&self) -> Result<AnalyticPotential> {
        match self.raw("potential", "kind") {
            "quadratic" => Ok(AnalyticPotential::Quadratic {
                lambda: self.f64("potential", "lambda")?,
            }),
            "double_well" => Ok(AnalyticPotential::DoubleWell {
                a: self.f64("potential", "a")?,
                b: self.f64("potential", "b")?,
            }),
            "flat" => Ok(AnalyticPotential::Flat),
            other => Err(Self::bad("potential", "kind", other, "quadratic, double_well or flat")),
        }
    }

    pub fn potential(&self, grid: &Arc<Grid>) -> Result<Potential> {
        Potential::sample(grid.clone(), self.analytic_potential()?)
    }

    pub fn operator(&self, grid: &Arc<Grid>) -> Result<FPOperator> {
        assemble_generator(grid, &self.potential(grid)?)?.with_dt_max(self.f64("semigroup", "dt_max")?)
    }

    /// Endpoint density from section `rho0` or `rho1`.
    pub fn density(&self, section: &str, grid: &Arc<Grid>) -> Result<GridDensity> {
        match self.raw(section, "kind") {
            "gaussian" => {
                let mean = self.f64_list(section, "mean")?;
                let mean = if mean.len() == 1 { vec![mean[0]; grid.dim()] } else { mean };
                if mean.len() != grid.dim() {
                    return Err(Self::bad(section, "mean", self.raw(section, "mean"), "one value or one per axis"));
                }
                GridDensity::gaussian(grid.clone(), &mean, self.f64(section, "var")?)
            }
            "gibbs" => Ok(self.potential(grid)?.gibbs_density()),
            "uniform" => Ok(GridDensity::uniform(grid.clone())),
            "one_hot" => GridDensity::one_hot(grid.clone(), self.usize(section, "cell")?),
            "file" => {
                let p = self.raw(section, "path");
                if p.is_empty() {
                    return Err(Self::bad(section, "path", p, "a density CSV path"));
                }
                GridDensity::read_csv(grid.clone(), &self.base_dir.join(p))
            }
            other => Err(Self::bad(section, "kind", other, "gaussian, gibbs, uniform, one_hot or file")),
        }
    }
}
