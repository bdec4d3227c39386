//! Command-line entry point.
//!
//! Five subcommands: `simulate` (export one ensemble), `estimate` (one
//! estimator on one fresh dataset), `mc-table` (the full Monte Carlo sweep),
//! `poc-check` (propagation-of-chaos rate table), and `variance` (limiting
//! variance constants). All read the same INI config format; positional
//! `key=value` arguments override config entries.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 numerical
//! failures.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::estimators::{
    asymptotic_variance_mc, contrast_estimator, default_iteration_count, fixed_point_estimator,
    iterative_estimator, ratio_estimator, ContrastGrid, EstimationResult, FixedPointConfig,
    RatioConfig,
};
use crate::fbm::{sample_fbm, HurstParameter, TimeGrid};
use crate::harness::{
    default_mesh, emit_results, format_summary, parse_initial, parse_shift_mode,
    parse_sum_scheme, render_results, EstimatorKind, ExperimentConfig, OutputFormat,
};
use crate::malliavin::poc_rate_report;
use crate::models::DriftModel;
use crate::rng;
use crate::sim::{euler_simulate, simulate_shifted_family, InitialCondition, ShiftMode};

#[derive(Debug, Parser)]
#[command(
    name = "fbm-ips",
    version,
    about = "Interacting particle systems driven by fractional Brownian motion: simulation, Malliavin diagnostics, and drift estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// INI config file; positional KEY=VALUE arguments override its entries
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output path (stdout for most subcommands when omitted)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Master seed, overriding the config's master_seed
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker thread count (default: FBM_IPS_THREADS, then all cores)
    #[arg(long, value_name = "K")]
    threads: Option<usize>,
    /// Output format for result tables
    #[arg(long, value_name = "csv|json")]
    format: Option<String>,
    /// Also print a text table in the RMSE (Bias) layout
    #[arg(long)]
    summary: bool,
    /// Config overrides, key=value or section.key=value
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one particle ensemble and export its paths as CSV
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one estimator on one freshly simulated dataset, print JSON
    Estimate {
        /// ratio | fixed_point | iterative | contrast (overrides the config)
        #[arg(long, value_name = "KEY")]
        estimator: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo sweep over the (H, N) grid, emitting one row per cell
    #[command(name = "mc-table")]
    McTable {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Propagation-of-chaos rate table over a list of ensemble sizes
    #[command(name = "poc-check")]
    PocCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo limiting-variance constants for a scalar model
    Variance {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Parse argv and run; never panics, always returns a process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Simulate { common }
        | Command::Estimate { common, .. }
        | Command::McTable { common }
        | Command::PocCheck { common }
        | Command::Variance { common } => common.clone(),
    };
    let threads = resolve_threads(common.threads)?;
    let body = || -> Result<()> {
        let map = load_map(&common)?;
        match cli.command {
            Command::Simulate { .. } => run_simulate(&map, &common),
            Command::Estimate { ref estimator, .. } => {
                run_estimate(&map, &common, estimator.as_deref())
            }
            Command::McTable { .. } => run_mc_table(&map, &common),
            Command::PocCheck { .. } => run_poc_check(&map, &common),
            Command::Variance { .. } => run_variance(&map, &common),
        }
    };
    match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {k}-thread pool: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FBM_IPS_THREADS") {
        Ok(value) => value
            .parse::<usize>()
            .map(Some)
            .map_err(|_| {
                Error::Config(format!(
                    "FBM_IPS_THREADS must be a nonnegative integer, got `{value}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn load_map(common: &CommonArgs) -> Result<ConfigMap> {
    let mut map = match &common.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::empty(),
    };
    for spec in &common.overrides {
        map.apply_override(spec)?;
    }
    Ok(map)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// The single-dataset inputs shared by `simulate` and `estimate`.
struct Dataset {
    model: DriftModel,
    theta0: Vec<f64>,
    sigma: f64,
    hurst: HurstParameter,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    initial: InitialCondition,
}

fn dataset_from_map(map: &ConfigMap, common: &CommonArgs) -> Result<Dataset> {
    let model_key = map
        .get_str("", "model")?
        .ok_or_else(|| Error::Config("missing required key `model`".into()))?;
    let model = DriftModel::by_key(&model_key)?;
    let theta0 = map
        .get_f64_list("", "theta0")?
        .ok_or_else(|| Error::Config("missing required key `theta0`".into()))?;
    if theta0.len() != model.p() {
        return Err(Error::Config(format!(
            "theta0 has {} entries but model `{}` has p = {}",
            theta0.len(),
            model.name(),
            model.p()
        )));
    }
    let h = map
        .get_f64("", "h")?
        .ok_or_else(|| Error::Config("missing required key `h`".into()))?;
    let hurst = HurstParameter::new(h)?;
    let horizon = map.get_f64("", "horizon")?.unwrap_or(1.0);
    let n_steps = match (map.get_usize("", "n_steps")?, map.get_f64("", "mesh")?) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either n_steps or mesh, not both".into()))
        }
        (Some(n), None) => n,
        (None, mesh) => {
            let mesh = mesh.unwrap_or_else(|| default_mesh(&model_key));
            ((horizon / mesh).round() as usize).max(2)
        }
    };
    let grid = TimeGrid::new(horizon, n_steps)?;
    let n_particles = map
        .get_usize("", "n_particles")?
        .ok_or_else(|| Error::Config("missing required key `n_particles`".into()))?;
    if n_particles == 0 {
        return Err(Error::Config("n_particles must be positive".into()));
    }
    let sigma = map.get_f64("", "sigma")?.unwrap_or(1.0);
    let seed = common
        .seed
        .or(map.get_u64("", "master_seed")?)
        .unwrap_or(1);
    let initial = match map.get_str("", "initial")? {
        Some(raw) => parse_initial(&raw)?,
        None => InitialCondition::StdNormal,
    };
    Ok(Dataset {
        model,
        theta0,
        sigma,
        hurst,
        grid,
        n_particles,
        seed,
        initial,
    })
}

fn simulate_dataset(ds: &Dataset) -> Result<crate::sim::ParticleEnsemble> {
    let noise = Arc::new(sample_fbm(
        ds.hurst,
        &ds.grid,
        ds.n_particles,
        ds.seed,
        &[rng::purpose::NOISE],
    )?);
    let initials = ds
        .initial
        .sample(ds.n_particles, ds.seed, &[rng::purpose::INITIAL])?;
    euler_simulate(
        &ds.model,
        &ds.theta0,
        ds.sigma,
        &ds.grid,
        &initials,
        &noise,
    )
}

fn run_simulate(map: &ConfigMap, common: &CommonArgs) -> Result<()> {
    let ds = dataset_from_map(map, common)?;
    map.ensure_all_used()?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("simulate needs --out PATH for the CSV".into()))?;
    let ensemble = simulate_dataset(&ds)?;
    ensemble.export_csv(out)?;
    Ok(())
}

fn estimation_to_json(result: &EstimationResult) -> Result<String> {
    let mut text = serde_json::to_string_pretty(result)
        .map_err(|e| Error::InvalidInput(format!("json serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn run_estimate(map: &ConfigMap, common: &CommonArgs, flag: Option<&str>) -> Result<()> {
    let ds = dataset_from_map(map, common)?;
    let estimator_key = match flag {
        Some(k) => k.to_string(),
        None => map.get_str("", "estimator")?.ok_or_else(|| {
            Error::Config("no estimator selected; pass --estimator or set `estimator`".into())
        })?,
    };
    if flag.is_some() {
        // Consume the config key, if any, so strict checking still passes.
        let _ = map.get_str("", "estimator")?;
    }
    let kind = EstimatorKind::from_key(&estimator_key)?;

    let result = match kind {
        EstimatorKind::Ratio => {
            let epsilon = map.get_f64("ratio", "epsilon")?.unwrap_or(0.15);
            let scheme = match map.get_str("ratio", "scheme")? {
                Some(s) => parse_sum_scheme(&s)?,
                None => crate::estimators::SumScheme::Trapezoid,
            };
            let mode = match map.get_str("ratio", "shift_mode")? {
                Some(s) => parse_shift_mode(&s)?,
                None => ShiftMode::Exact,
            };
            map.ensure_all_used()?;
            let ensemble = simulate_dataset(&ds)?;
            let family = simulate_shifted_family(&ensemble, epsilon, mode)?;
            ratio_estimator(&family, &ds.model, &RatioConfig { scheme })?
        }
        EstimatorKind::FixedPoint => {
            let config = FixedPointConfig {
                tol: map.get_f64("fixed_point", "tol")?.unwrap_or(1e-8),
                max_iter: map.get_usize("fixed_point", "max_iter")?.unwrap_or(50),
                theta_init: map.get_f64("fixed_point", "theta_init")?,
            };
            map.ensure_all_used()?;
            if ds.model.p() != 1 {
                return Err(Error::ScalarParameterOnly {
                    estimator: "fixed_point",
                    p: ds.model.p(),
                });
            }
            let ensemble = simulate_dataset(&ds)?;
            fixed_point_estimator(&ensemble, &ds.model, &config)?
        }
        EstimatorKind::Iterative => {
            let n_iters = map
                .get_usize("iterative", "n_iters")?
                .unwrap_or_else(|| default_iteration_count(ds.n_particles));
            let theta_init = map.get_f64("iterative", "theta_init")?;
            map.ensure_all_used()?;
            if ds.model.p() != 1 {
                return Err(Error::ScalarParameterOnly {
                    estimator: "iterative",
                    p: ds.model.p(),
                });
            }
            let ensemble = simulate_dataset(&ds)?;
            iterative_estimator(&ensemble, &ds.model, n_iters, theta_init)?
        }
        EstimatorKind::Contrast => {
            let lo = map.get_f64_list("contrast", "lo")?;
            let hi = map.get_f64_list("contrast", "hi")?;
            let mesh = map.get_f64_list("contrast", "mesh")?;
            map.ensure_all_used()?;
            let (lo, hi, mesh) = match (lo, hi, mesh) {
                (Some(l), Some(h), Some(m)) => (l, h, m),
                _ => {
                    return Err(Error::Config(
                        "contrast estimator needs [contrast] lo, hi, mesh".into(),
                    ))
                }
            };
            let grid = ContrastGrid::new(lo, hi, mesh)?;
            let ensemble = simulate_dataset(&ds)?;
            contrast_estimator(&ensemble, &ds.model, &grid)?
        }
    };
    write_or_print(&estimation_to_json(&result)?, common.out.as_deref())
}

fn run_mc_table(map: &ConfigMap, common: &CommonArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_map(map)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    let format = match &common.format {
        Some(f) => OutputFormat::from_key(f)?,
        None => OutputFormat::Csv,
    };
    let rows = crate::harness::run_experiment(&config)?;
    match common.out.as_deref() {
        Some(path) => emit_results(&rows, path, format)?,
        None => print!("{}", render_results(&rows, format)?),
    }
    if common.summary {
        print!("{}", format_summary(&rows));
    }
    Ok(())
}

fn run_poc_check(map: &ConfigMap, common: &CommonArgs) -> Result<()> {
    let model_key = map
        .get_str("", "model")?
        .ok_or_else(|| Error::Config("missing required key `model`".into()))?;
    let model = DriftModel::by_key(&model_key)?;
    let theta0 = map
        .get_f64_list("", "theta0")?
        .ok_or_else(|| Error::Config("missing required key `theta0`".into()))?;
    let h = map
        .get_f64("", "h")?
        .ok_or_else(|| Error::Config("missing required key `h`".into()))?;
    let hurst = HurstParameter::new(h)?;
    let horizon = map.get_f64("", "horizon")?.unwrap_or(1.0);
    let n_steps = map.get_usize("", "n_steps")?.unwrap_or(500);
    let grid = TimeGrid::new(horizon, n_steps)?;
    let sigma = map.get_f64("", "sigma")?.unwrap_or(1.0);
    let n_list = map
        .get_usize_list("", "n_list")?
        .unwrap_or_else(|| vec![10, 20, 40, 80]);
    let reps = map.get_usize("", "reps")?.unwrap_or(100);
    let seed = common
        .seed
        .or(map.get_u64("", "master_seed")?)
        .unwrap_or(1);
    map.ensure_all_used()?;

    let report = poc_rate_report(&model, &theta0, sigma, &grid, hurst, &n_list, reps, seed)?;
    match common.out.as_deref() {
        Some(path) => report.export_csv(path),
        None => {
            let mut text = String::from("quantity,N,estimate,stderr,slope,slope_stderr\n");
            for r in &report.rows {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.quantity, r.n_particles, r.estimate, r.stderr, r.slope, r.slope_stderr
                ));
            }
            print!("{text}");
            Ok(())
        }
    }
}

fn run_variance(map: &ConfigMap, common: &CommonArgs) -> Result<()> {
    let model_key = map
        .get_str("", "model")?
        .ok_or_else(|| Error::Config("missing required key `model`".into()))?;
    let model = DriftModel::by_key(&model_key)?;
    let theta0 = map
        .get_f64_list("", "theta0")?
        .ok_or_else(|| Error::Config("missing required key `theta0`".into()))?;
    let h = map
        .get_f64("", "h")?
        .ok_or_else(|| Error::Config("missing required key `h`".into()))?;
    let hurst = HurstParameter::new(h)?;
    let horizon = map.get_f64("", "horizon")?.unwrap_or(1.0);
    let n_steps = map.get_usize("", "n_steps")?.unwrap_or(200);
    let grid = TimeGrid::new(horizon, n_steps)?;
    let sigma = map.get_f64("", "sigma")?.unwrap_or(1.0);
    let n_mc = map.get_usize("", "n_mc")?.unwrap_or(200);
    let seed = common
        .seed
        .or(map.get_u64("", "master_seed")?)
        .unwrap_or(1);
    map.ensure_all_used()?;

    let report = asymptotic_variance_mc(&model, &theta0, sigma, hurst, &grid, n_mc, seed)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("json serialization failed: {e}")))?;
    text.push('\n');
    write_or_print(&text, common.out.as_deref())
}
