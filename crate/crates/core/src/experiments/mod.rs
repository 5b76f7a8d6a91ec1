//! Batch runners behind the `ldpflow` binary.
//!
//! A run reads a [`Config`], writes its CSVs, a `checks.csv` with every
//! invariant evaluated, and a `manifest.txt` echoing the effective
//! configuration into its output directory. Exit status is 0 when every
//! check passes, 1 otherwise (with `failures.csv`), and 2 when the
//! configuration is rejected before any work starts.

mod config;
pub mod suites;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{Config, SCHEMA};
pub use suites::{Check, CHECKS_CSV_HEADER};

use crate::error::{Error, Result};
use crate::particles::{empirical_convergence_report, simulate, ConvergenceConfig, ParticleEnsemble};
use crate::rate_ldp::{
    gamma_sweep, geodesic_samples, rate_lower_reference, rate_upper_with, static_rate, EpsilonSchedule, GammaSweepConfig,
    TransitionKernel,
};
use crate::static_ot::{displacement_interpolation, w2_entropic, w2_squared};
use crate::dynamic_action::{kinetic_action, DiscreteCurve};
use suites::{
    checks_csv, jko_order_csv, jko_order_sweep, norm_check_suite, schedule_checks, schedule_csv, semigroup_suite,
    NormCheckConfig, SemigroupSuiteConfig,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    /// Rate gap against the free-energy target over a sweep of horizons.
    GammaSweep,
    /// Certified interval and static bridge value per horizon.
    Rate,
    /// Wasserstein distance by exact and entropic solvers and the geodesic action.
    W2,
    /// Semigroup property suite.
    Semigroup,
    /// Convergence order of the iterated JKO scheme.
    Jko,
    /// Empirical measures of particles against the Fokker-Planck solution.
    Particles,
    /// Duality of the weighted negative Sobolev norm.
    NormCheck,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::GammaSweep => "gamma-sweep",
            Subcommand::Rate => "rate",
            Subcommand::W2 => "w2",
            Subcommand::Semigroup => "semigroup",
            Subcommand::Jko => "jko",
            Subcommand::Particles => "particles",
            Subcommand::NormCheck => "norm-check",
        }
    }

    fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

/// Files and checks produced by one run.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

impl Report {
    fn file(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }
}

type Job = Box<dyn FnOnce() -> Result<Report>>;

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    /// Config error or failed checks, one line each.
    pub messages: Vec<String>,
}

/// Reads the config, builds every input and returns the deferred computation.
fn plan(sub: Subcommand, cfg: &Config, seed: u64) -> Result<Job> {
    let grid = cfg.grid()?;
    let op = cfg.operator(&grid)?;
    let rho0 = cfg.density("rho0", &grid)?;
    let rho1 = cfg.density("rho1", &grid)?;
    let stem = sub.file_stem();
    Ok(match sub {
        Subcommand::GammaSweep => {
            let mut sc = GammaSweepConfig::new(rho0, rho1, op);
            sc.taus = cfg.f64_list("gamma_sweep", "taus")?;
            sc.k_per_segment = cfg.usize("gamma_sweep", "k_per_segment")?;
            sc.record_wall_time = cfg.bool("gamma_sweep", "record_wall_time")?;
            let noise = cfg.f64("gamma_sweep", "err_noise")?;
            Box::new(move || {
                let out = gamma_sweep(&sc)?;
                let mut r = Report::default();
                r.file(format!("{stem}.csv"), out.to_csv());
                for rec in &out.records {
                    r.checks.push(Check::at_least(
                        format!("lower_bound/tau={}", rec.tau),
                        rec.gap - rec.half_delta_f + rec.tol_chain,
                        0.0,
                    ));
                }
                for w in out.records.windows(2) {
                    r.checks.push(Check::at_most(
                        format!("err_nonincreasing/tau={}", w[1].tau),
                        w[1].err.abs(),
                        w[0].err.abs() * (1.0 + noise),
                    ));
                }
                for (tau, e) in &out.failures {
                    r.checks.push(failed(format!("tau={tau}: {e}")));
                }
                let geo = geodesic_samples(&sc.rho0, &sc.rho1, sc.k_per_segment)?;
                let schedule = EpsilonSchedule::new(&geo, &sc.op)?;
                r.file("schedule.csv", schedule_csv(&schedule));
                if !schedule.degenerate && out.failures.is_empty() {
                    r.checks.extend(schedule_checks(&schedule, &sc.taus)?);
                }
                Ok(r)
            })
        }
        Subcommand::Rate => {
            let taus = cfg.f64_list("rate", "taus")?;
            let k = cfg.usize("rate", "k_per_segment")?;
            let tol = cfg.f64("rate", "static_tolerance")?;
            Box::new(move || {
                let mut csv = String::from("tau,lower,upper,midpoint,static,static_rel_diff\n");
                let mut r = Report::default();
                for tau in taus {
                    let lower = rate_lower_reference(&rho0, &rho1, &op, tau)?;
                    let upper = rate_upper_with(&rho0, &rho1, &op, tau, k)?;
                    let kernel = TransitionKernel::for_operator(&op, tau)?;
                    let stat = static_rate(&rho0, &rho1, &kernel)?.value;
                    let mid = 0.5 * (lower + upper);
                    let rel = (stat - mid).abs() / mid.abs().max(f64::MIN_POSITIVE);
                    let _ = writeln!(csv, "{tau:?},{lower:?},{upper:?},{mid:?},{stat:?},{rel:?}");
                    r.checks.push(Check::at_least(format!("interval_ordered/tau={tau}"), upper - lower, 0.0));
                    r.checks.push(Check::at_most(format!("static_vs_midpoint/tau={tau}"), rel, tol));
                }
                r.file(format!("{stem}.csv"), csv);
                Ok(r)
            })
        }
        Subcommand::W2 => {
            let eps = cfg.f64("w2", "entropic_eps")?;
            let steps = cfg.usize("w2", "geodesic_steps")?;
            let tol = cfg.f64("w2", "action_tolerance")?;
            Box::new(move || {
                let exact = w2_squared(&rho0, &rho1)?;
                let entropic = w2_entropic(&rho0, &rho1, eps)?;
                let times: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
                let geo = displacement_interpolation(&rho0, &rho1, &times)?;
                let action = kinetic_action(&DiscreteCurve::uniform(geo.densities)?)?
                    .finite()
                    .unwrap_or(f64::INFINITY);
                let rel = (action - exact).abs() / exact.max(f64::MIN_POSITIVE);
                let mut r = Report::default();
                r.file(
                    format!("{stem}.csv"),
                    format!(
                        "w2sq_exact,w2sq_entropic,entropic_eps,geodesic_action,action_rel_diff\n{exact:?},{:?},{eps:?},{action:?},{rel:?}\n",
                        entropic.distance_estimate.powi(2)
                    ),
                );
                r.checks.push(Check::at_most("geodesic_action_vs_w2sq", if exact > 0.0 { rel } else { action }, tol));
                Ok(r)
            })
        }
        Subcommand::Semigroup => {
            let sc = SemigroupSuiteConfig {
                times: cfg.f64_list("semigroup_suite", "times")?,
                eps_sweep: cfg.f64_list("semigroup_suite", "eps_sweep")?,
                dissipation_steps: cfg.usize_list("semigroup_suite", "dissipation_steps")?,
                dissipation_tau: cfg.f64("semigroup_suite", "dissipation_tau")?,
            };
            Box::new(move || {
                Ok(Report {
                    files: Vec::new(),
                    checks: semigroup_suite(&op, &rho0, &rho1, &sc)?,
                })
            })
        }
        Subcommand::Jko => {
            let t = cfg.f64("jko", "t")?;
            let steps = cfg.usize_list("jko", "steps")?;
            let reference = op.clone().with_dt_max(cfg.f64("jko", "reference_dt_max")?)?;
            let (lo, hi) = (cfg.f64("jko", "ratio_min")?, cfg.f64("jko", "ratio_max")?);
            let pot = op.potential().clone();
            Box::new(move || {
                let rows = jko_order_sweep(&rho0, &pot, &reference, t, &steps)?;
                let mut r = Report::default();
                r.file(format!("{stem}.csv"), jko_order_csv(&rows));
                for row in &rows {
                    if let Some(q) = row.ratio {
                        r.checks.push(Check::at_least(format!("ratio_min/n={}", row.n), q, lo));
                        r.checks.push(Check::at_most(format!("ratio_max/n={}", row.n), q, hi));
                    }
                }
                Ok(r)
            })
        }
        Subcommand::Particles => {
            let analytic = cfg.analytic_potential()?;
            let pc = ConvergenceConfig {
                rho0: rho0.clone(),
                potential: analytic,
                op: op.clone(),
                t: cfg.f64("particles", "t")?,
                dt: cfg.f64("particles", "dt")?,
                sizes: cfg.usize_list("particles", "sizes")?,
                seeds: cfg.usize("particles", "seeds")?,
                base_seed: seed,
                at_centers: cfg.bool("particles", "at_centers")?,
            };
            let moment_n = cfg.usize("particles", "moment_particles")?;
            let dump = cfg.bool("particles", "dump_ensemble")?;
            Box::new(move || {
                let report = empirical_convergence_report(&pc)?;
                let mut r = Report::default();
                r.file(format!("{stem}.csv"), report.to_csv());
                let means: Vec<f64> = report.rows.iter().map(|row| row.mean_w2).collect();
                r.checks.push(Check::decreasing("mean_w2_decreasing", &means));
                if moment_n > 0 {
                    let grid = rho0.grid().clone();
                    let start = ParticleEnsemble::sample(&rho0, moment_n, seed, pc.at_centers)?;
                    let end = simulate(&start, &pc.potential, &grid, pc.t, pc.dt)?;
                    let mut csv = String::from("axis,sample_mean,sample_variance,expected_mean,expected_variance,se_mean,se_variance,tail_mass\n");
                    if let crate::grid::AnalyticPotential::Quadratic { lambda } = pc.potential {
                        let (m0, v0) = (rho0.mean(), rho0.variance_piecewise());
                        for k in 0..grid.dim() {
                            let (m, v) = end.moments(k);
                            let em = m0[k] * (-lambda * pc.t).exp();
                            let ev = 1.0 / lambda + (v0[k] - 1.0 / lambda) * (-2.0 * lambda * pc.t).exp();
                            let se_m = (ev / moment_n as f64).sqrt();
                            let se_v = ev * (2.0 / moment_n as f64).sqrt();
                            // whole-space mass outside the box, which reflection folds back in
                            let tail = 1.0 - crate::grid::gaussian_interval_mass(grid.lower()[k], grid.upper()[k], em, ev.sqrt());
                            let _ = writeln!(csv, "{k},{m:?},{v:?},{em:?},{ev:?},{se_m:?},{se_v:?},{tail:?}");
                            r.checks.push(Check::at_most(format!("ou_mean/axis={k}"), (m - em).abs(), 3.0 * se_m));
                            r.checks.push(Check::at_most(format!("ou_variance/axis={k}"), (v - ev).abs(), 3.0 * se_v));
                        }
                    }
                    r.file("moments.csv", csv);
                    if dump {
                        r.file("ensemble.csv", end.to_csv());
                    }
                }
                Ok(r)
            })
        }
        Subcommand::NormCheck => {
            let nc = NormCheckConfig {
                instances: cfg.usize("norm_check", "instances")?,
                max_cells: cfg.usize("norm_check", "max_cells")?,
                oracle_instances: cfg.usize("norm_check", "oracle_instances")?,
                oracle_max_cells: cfg.usize("norm_check", "oracle_max_cells")?,
                tolerance: cfg.f64("norm_check", "tolerance")?,
                oracle_tolerance: cfg.f64("norm_check", "oracle_tolerance")?,
                seed,
            };
            if nc.max_cells < 2 || nc.oracle_max_cells < 2 || nc.oracle_max_cells > 64 {
                return Err(Error::Config("[norm_check] grids need between 2 and 64 cells".into()));
            }
            Box::new(move || {
                let rep = norm_check_suite(&nc)?;
                Ok(Report {
                    files: vec![(format!("{stem}.csv"), rep.csv)],
                    checks: rep.checks,
                })
            })
        }
    })
}

fn failed(detail: String) -> Check {
    Check {
        name: detail,
        value: f64::NAN,
        threshold: f64::NAN,
        pass: false,
    }
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

fn manifest(sub: Subcommand, config_path: &Path, cfg: Option<&Config>, seed: u64, exit_code: i32, seconds: f64, outputs: &[String]) -> String {
    let mut m = String::from("# ldpflow run manifest\n[run]\n");
    let _ = writeln!(m, "subcommand = {}", sub.name());
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "config = {}", config_path.display());
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "exit_code = {exit_code}");
    let _ = writeln!(m, "wall_seconds = {seconds:.3}");
    let _ = writeln!(m, "outputs = {}", outputs.join(", "));
    if let Some(cfg) = cfg {
        m.push_str("\n# effective configuration\n");
        m.push_str(&cfg.echo());
    }
    m
}

/// Runs `sub` on the config at `config_path`, writing into `out` (default
/// `out/<subcommand>`). `seed` overrides the configured seed.
pub fn run(sub: Subcommand, config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunOutcome> {
    let start = Instant::now();
    let out_dir = out.map_or_else(|| PathBuf::from("out").join(sub.name()), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir)?;
    let write = |name: &str, content: &str| std::fs::write(out_dir.join(name), content);

    let parsed = Config::load(config_path).and_then(|cfg| {
        let seed = match seed {
            Some(s) => s,
            None => cfg.u64("run", "seed")?,
        };
        let job = plan(sub, &cfg, seed)?;
        Ok((cfg, seed, job))
    });
    let (cfg, seed, job) = match parsed {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            write("manifest.txt", &manifest(sub, config_path, None, seed.unwrap_or(0), EXIT_CONFIG, start.elapsed().as_secs_f64(), &[]))?;
            return Ok(RunOutcome {
                exit_code: EXIT_CONFIG,
                out_dir,
                messages: vec![msg],
            });
        }
    };

    let report = job().unwrap_or_else(|e| Report {
        files: Vec::new(),
        checks: vec![failed(format!("error: {e}"))],
    });
    let mut outputs = Vec::new();
    for (name, content) in &report.files {
        write(name, content)?;
        outputs.push(name.clone());
    }
    write("checks.csv", &checks_csv(&report.checks))?;
    outputs.push("checks.csv".into());
    let failures: Vec<&Check> = report.checks.iter().filter(|c| !c.pass).collect();
    let exit_code = if failures.is_empty() { EXIT_PASS } else { EXIT_INVARIANT };
    let mut messages = Vec::new();
    if failures.is_empty() {
        let _ = std::fs::remove_file(out_dir.join("failures.csv"));
    } else {
        let mut f = String::from("check,value,threshold\n");
        for c in &failures {
            let _ = writeln!(f, "{},{:?},{:?}", csv_field(&c.name), c.value, c.threshold);
            messages.push(format!("{}: value {} threshold {}", c.name, c.value, c.threshold));
        }
        write("failures.csv", &f)?;
        outputs.push("failures.csv".into());
    }
    write(
        "manifest.txt",
        &manifest(sub, config_path, Some(&cfg), seed, exit_code, start.elapsed().as_secs_f64(), &outputs),
    )?;
    Ok(RunOutcome {
        exit_code,
        out_dir,
        messages,
    })
}
