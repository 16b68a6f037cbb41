//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 configuration or JSON error, 3 numeric failure,
//! 4 precondition failure.

pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::coercivity::{self, HypothesisSpace, SpaceSpec};
use crate::density::{self, DensityGrid, Estimator, GridSpec, McSpec};
use crate::dynamics::{self, build_frame, Ensemble, Layout, SystemSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::learn;
use crate::pdkernels::{self, KernelSpec};
use crate::potentials::{Potential, PotentialSpec};

#[derive(Parser, Debug)]
#[command(
    name = "ipslab",
    version,
    about = "Interacting particle systems: simulation, stationary densities, coercivity and kernel tests"
)]
pub struct Cli {
    /// Overrides the seed of the loaded system or config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LayoutArg {
    Full,
    Relative,
    Y,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Full => Layout::Full,
            LayoutArg::Relative => Layout::Relative,
            LayoutArg::Y => Layout::Y,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Source {
    Stationary,
    Ensemble,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Pd,
    Nd,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate an ensemble and save it as binary plus JSON sidecar.
    Simulate {
        /// System spec (file path or inline JSON).
        #[arg(long)]
        system: String,
        #[arg(long, value_enum, default_value = "relative")]
        layout: LayoutArg,
        /// Also write a CSV dump.
        #[arg(long)]
        csv: bool,
    },
    /// Stationary density on a grid, optionally compared with an ensemble.
    Density {
        #[arg(long)]
        system: String,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Snapshot times compared with the stationary density.
        #[arg(long = "time")]
        times: Vec<f64>,
        /// Kernel bandwidth; histogram binning when absent.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Coercivity report for a hypothesis space.
    Coercivity {
        #[arg(long)]
        space: String,
        #[arg(long, value_enum)]
        source: Source,
        /// Ensemble manifest for `--source ensemble`.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// System spec simulated for `--source stationary`; the second
        /// half of the run is pooled.
        #[arg(long)]
        system: Option<String>,
        /// Time horizons for time-averaged reports.
        #[arg(long = "T")]
        horizons: Vec<f64>,
    },
    /// Randomized Gram tests of kernels.
    Pdtest {
        /// Kernel spec; omit with `--suite`.
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long, value_enum, default_value = "pd")]
        mode: Mode,
        /// Run the whole appendix suite.
        #[arg(long)]
        suite: bool,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Least-squares estimate of the interaction kernel.
    Learn {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        space: String,
        #[arg(long)]
        reg: Option<f64>,
        /// Potential used to generate the data, for error reporting.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
        window: Option<Vec<f64>>,
    },
    /// Run an experiment config end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// CSV tables from a run manifest.
    Report {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) => 2,
        Error::Numeric(_) | Error::Domain(_) | Error::Quadrature { .. } => 3,
        Error::Precondition(_) => 4,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(t) = cli.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// A JSON argument given inline or as a file path.
fn json_arg<T: DeserializeOwned>(arg: &str) -> Result<T> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { std::fs::read_to_string(arg)? };
    Ok(serde_json::from_str(&text)?)
}

fn emit<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    io::write_json_atomic(&out.join(name), value)?;
    print!("{}", io::to_json_pretty(value)?);
    Ok(())
}

fn load_system(arg: &str, seed: Option<u64>) -> Result<SystemSpec> {
    let mut s: SystemSpec = json_arg(arg)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Simulate { system, layout, csv } => {
            let spec = load_system(system, cli.seed)?;
            let ens = dynamics::simulate(&spec, (*layout).into())?;
            let m = ens.save(&out, "ensemble")?;
            if *csv {
                let mut buf = Vec::new();
                ens.write_csv(&mut buf)?;
                io::write_atomic(&out.join("ensemble.csv"), &buf)?;
            }
            print!("{}", io::to_json_pretty(&m)?);
            Ok(())
        }
        Command::Density { system, grid, ensemble, times, bandwidth } => {
            let spec = load_system(system, cli.seed)?;
            let p = Potential::from_spec(&spec.potential)?;
            let frame = build_frame(spec.n, spec.d)?;
            let grid: GridSpec = match grid {
                Some(g) => json_arg(g)?,
                None => GridSpec::default(),
            };
            let mc = McSpec { seed: spec.seed, ..McSpec::default() };
            let p_inf = density::stationary_density(&frame, &p, &grid, &mc)?;
            p_inf.save(&out, "density.stationary")?;
            let mut rows = Vec::new();
            if let Some(path) = ensemble {
                let ens = Ensemble::load(path)?;
                let est = match bandwidth {
                    Some(h) => Estimator::Kde { bandwidth: *h },
                    None => Estimator::Histogram,
                };
                let ts: Vec<f64> =
                    if times.is_empty() { vec![*ens.times.last().expect("snapshots")] } else { times.clone() };
                for t in ts {
                    let k = ens.time_index(t);
                    let g: DensityGrid = density::empirical_density(&ens, k, &p_inf.axes, est)?;
                    rows.push(serde_json::json!({"t": ens.times[k], "l1_distance": density::l1_distance(&g, &p_inf)?}));
                }
            }
            let summary = serde_json::json!({
                "normalization": p_inf.normalization,
                "deficit": p_inf.deficit,
                "axes": p_inf.axes,
                "l1": rows,
            });
            emit(&out, "density.summary.json", &summary)
        }
        Command::Coercivity { space, source, ensemble, system, horizons } => {
            let spec: SpaceSpec = json_arg(space)?;
            let seed = cli.seed.unwrap_or(0);
            let ens = match source {
                Source::Ensemble => {
                    let path = ensemble
                        .as_ref()
                        .ok_or_else(|| Error::config("--source ensemble needs --ensemble <manifest>"))?;
                    Ensemble::load(path)?
                }
                Source::Stationary => {
                    let sys =
                        system.as_ref().ok_or_else(|| Error::config("--source stationary needs --system <spec>"))?;
                    dynamics::simulate(&load_system(sys, cli.seed)?, Layout::Relative)?
                }
            };
            let t_end = *ens.times.last().expect("snapshots");
            let from = match source {
                Source::Stationary => 0.5 * t_end,
                Source::Ensemble => t_end,
            };
            let samples = coercivity::pooled_samples(&ens, from, 1)?;
            let hs = HypothesisSpace::from_spec(&spec, Some(&coercivity::pair_distances(&samples, ens.d)))?;
            let stationary = coercivity::estimate_i_infty(&hs, &samples, ens.d, seed)?;
            let averaged = horizons
                .iter()
                .map(|t| coercivity::estimate_i_bar_t(&hs, &ens, *t, seed))
                .collect::<Result<Vec<_>>>()?;
            emit(&out, "coercivity.json", &serde_json::json!({"stationary": stationary, "time_averaged": averaged}))
        }
        Command::Pdtest { kernel, mode, suite, d, n, trials } => {
            let seed = cli.seed.unwrap_or(1);
            if *suite {
                let entries = pdkernels::appendix_suite(*d, *n, *trials, seed)?;
                let failed = entries.iter().filter(|e| !e.passed).count();
                emit(&out, "pdtest.suite.json", &entries)?;
                if failed > 0 {
                    return Err(Error::numeric(format!("{failed} suite entries failed")));
                }
                return Ok(());
            }
            let spec: KernelSpec =
                json_arg(kernel.as_deref().ok_or_else(|| Error::config("pdtest needs --kernel or --suite"))?)?;
            let k = spec.build()?;
            let r = match mode {
                Mode::Pd => pdkernels::test_pd(&k, *d, *n, *trials, seed)?,
                Mode::Nd => pdkernels::test_nd(&k, *d, *n, *trials, seed)?,
            };
            emit(&out, "pdtest.json", &r)
        }
        Command::Learn { ensemble, space, reg, truth, window } => {
            let ens = Ensemble::load(ensemble)?;
            let spec: SpaceSpec = json_arg(space)?;
            let last = ens.n_times() - 1;
            let distances = if ens.n >= 3 {
                coercivity::pair_distances(&ens.pair_samples(last)?, ens.d)
            } else {
                let rel = if ens.layout == Layout::Relative { ens.clone() } else { ens.to_layout(Layout::Relative)? };
                ens_distances(&rel, last)
            };
            let hs = HypothesisSpace::from_spec(&spec, Some(&distances))?;
            let t_end = *ens.times.last().expect("snapshots");
            let w = window.as_ref().map(|v| (v[0], v[1])).unwrap_or((0.0, t_end));
            let prob = learn::assemble(&ens, &hs, w)?;
            let truth_p = match truth {
                Some(t) => Some(Potential::from_spec(&json_arg::<PotentialSpec>(t)?)?),
                None => None,
            };
            let phi = |r: f64| truth_p.as_ref().map(|p| p.eval_phi(r).unwrap_or(f64::NAN)).unwrap_or(f64::NAN);
            let rep = learn::solve_and_report(
                &prob,
                &hs,
                *reg,
                truth_p.as_ref().map(|_| &phi as &dyn Fn(f64) -> f64),
                &distances,
                None,
            )?;
            emit(&out, "learn.json", &rep)
        }
        Command::Run { config } => {
            let (mut cfg, sha) = config::ExperimentConfig::load(config)?;
            if let Some(s) = cli.seed {
                cfg.system.seed = s;
            }
            let dir = cli.out.clone();
            let m = pipeline::run(&cfg, &sha, dir.as_deref())?;
            print!("{}", io::to_json_pretty(&m)?);
            Ok(())
        }
        Command::Report { manifest } => {
            let o = report::report(manifest, &out)?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            for t in &o.tables {
                println!("{}", t.display());
            }
            Ok(())
        }
    }
}

fn ens_distances(rel: &Ensemble, t: usize) -> Vec<f64> {
    let d = rel.d;
    rel.live_paths().map(|p| rel.state(p, t)[..d].iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}
