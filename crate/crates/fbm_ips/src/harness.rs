//! Monte Carlo experiment driver.
//!
//! Takes a declarative [`ExperimentConfig`] (usually parsed from an INI file),
//! sweeps the (H, N) grid for every requested estimator, and aggregates
//! per-replication errors into [`ResultRow`]s. Seeds are derived from the
//! cell indices and the replication index, never from execution order, so
//! results are byte-identical for any worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::estimators::{
    contrast_estimator, default_iteration_count, fixed_point_estimator, iterative_estimator,
    ratio_estimator, ContrastGrid, FixedPointConfig, RatioConfig, SumScheme,
};
use crate::fbm::{sample_fbm, HurstParameter, TimeGrid};
use crate::models::DriftModel;
use crate::rng;
use crate::sim::{
    euler_simulate, simulate_shifted_family, InitialCondition, ShiftMode,
};

/// The four estimator entry points the harness can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimatorKind {
    Ratio,
    FixedPoint,
    Iterative,
    Contrast,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Ratio,
        EstimatorKind::FixedPoint,
        EstimatorKind::Iterative,
        EstimatorKind::Contrast,
    ];

    pub fn key(self) -> &'static str {
        match self {
            EstimatorKind::Ratio => "ratio",
            EstimatorKind::FixedPoint => "fixed_point",
            EstimatorKind::Iterative => "iterative",
            EstimatorKind::Contrast => "contrast",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown estimator `{key}`; expected one of ratio, fixed_point, iterative, contrast"
                ))
            })
    }
}

pub fn parse_shift_mode(value: &str) -> Result<ShiftMode> {
    match value {
        "exact" => Ok(ShiftMode::Exact),
        "frozen" => Ok(ShiftMode::Frozen),
        other => Err(Error::Config(format!(
            "unknown shift mode `{other}`; expected exact or frozen"
        ))),
    }
}

pub fn parse_sum_scheme(value: &str) -> Result<SumScheme> {
    match value {
        "trapezoid" => Ok(SumScheme::Trapezoid),
        "forward" => Ok(SumScheme::Forward),
        other => Err(Error::Config(format!(
            "unknown sum scheme `{other}`; expected trapezoid or forward"
        ))),
    }
}

/// `normal` for iid standard normals, otherwise a number for a deterministic
/// constant start.
pub fn parse_initial(value: &str) -> Result<InitialCondition> {
    if value == "normal" {
        return Ok(InitialCondition::StdNormal);
    }
    value
        .parse::<f64>()
        .map(InitialCondition::Constant)
        .map_err(|_| {
            Error::Config(format!(
                "initial condition must be `normal` or a number, got `{value}`"
            ))
        })
}

/// Time mesh used when the config gives neither `n_steps` nor `mesh`.
pub fn default_mesh(model_key: &str) -> f64 {
    if model_key == "linear" {
        0.001
    } else {
        0.005
    }
}

/// Per-estimator knobs; anything left `None` falls back to the global value
/// or the built-in default.
#[derive(Debug, Clone, Default)]
pub struct EstimatorOverrides {
    /// Horizon per Hurst index, parallel to `h_list` (the contraction bound
    /// shrinks the admissible horizon as H grows).
    pub horizons: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub scheme: Option<SumScheme>,
    pub shift_mode: Option<ShiftMode>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub theta_init: Option<f64>,
    pub n_iters: Option<usize>,
    pub grid_lo: Option<Vec<f64>>,
    pub grid_hi: Option<Vec<f64>>,
    pub grid_mesh: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: String,
    pub theta0: Vec<f64>,
    pub h_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub horizon: f64,
    pub n_steps: Option<usize>,
    pub mesh: Option<f64>,
    pub sigma: f64,
    pub epsilon: f64,
    pub estimators: Vec<EstimatorKind>,
    pub mc_reps: usize,
    pub master_seed: u64,
    pub shift_mode: ShiftMode,
    pub initial: InitialCondition,
    /// Wall times are nondeterministic, so they are reported as 0 unless
    /// explicitly requested (keeps repeated runs byte-identical).
    pub record_wall_time: bool,
    pub overrides: BTreeMap<&'static str, EstimatorOverrides>,
}

impl ExperimentConfig {
    /// A minimal single-cell configuration; tests and callers override
    /// fields as needed.
    pub fn new(model: &str, theta0: Vec<f64>) -> Self {
        ExperimentConfig {
            model: model.to_string(),
            theta0,
            h_list: vec![0.6],
            n_list: vec![10],
            horizon: 1.0,
            n_steps: None,
            mesh: None,
            sigma: 1.0,
            epsilon: 0.15,
            estimators: vec![EstimatorKind::Ratio],
            mc_reps: 100,
            master_seed: 1,
            shift_mode: ShiftMode::Exact,
            initial: InitialCondition::StdNormal,
            record_wall_time: false,
            overrides: BTreeMap::new(),
        }
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let model = map
            .get_str("", "model")?
            .ok_or_else(|| Error::Config("missing required key `model`".into()))?;
        let theta0 = map
            .get_f64_list("", "theta0")?
            .ok_or_else(|| Error::Config("missing required key `theta0`".into()))?;
        let h_list = map
            .get_f64_list("", "h_list")?
            .ok_or_else(|| Error::Config("missing required key `h_list`".into()))?;
        let n_list = map
            .get_usize_list("", "n_list")?
            .ok_or_else(|| Error::Config("missing required key `n_list`".into()))?;
        let estimator_keys = map
            .get_str_list("", "estimators")?
            .ok_or_else(|| Error::Config("missing required key `estimators`".into()))?;
        let mut estimators = Vec::new();
        for key in &estimator_keys {
            estimators.push(EstimatorKind::from_key(key)?);
        }

        let mut config = ExperimentConfig::new(&model, theta0);
        config.h_list = h_list;
        config.n_list = n_list;
        config.estimators = estimators;
        if let Some(v) = map.get_f64("", "horizon")? {
            config.horizon = v;
        }
        config.n_steps = map.get_usize("", "n_steps")?;
        config.mesh = map.get_f64("", "mesh")?;
        if let Some(v) = map.get_f64("", "sigma")? {
            config.sigma = v;
        }
        if let Some(v) = map.get_f64("", "epsilon")? {
            config.epsilon = v;
        }
        if let Some(v) = map.get_usize("", "mc_reps")? {
            config.mc_reps = v;
        }
        if let Some(v) = map.get_u64("", "master_seed")? {
            config.master_seed = v;
        }
        if let Some(v) = map.get_str("", "shift_mode")? {
            config.shift_mode = parse_shift_mode(&v)?;
        }
        if let Some(v) = map.get_str("", "initial")? {
            config.initial = parse_initial(&v)?;
        }
        if let Some(v) = map.get_bool("", "record_wall_time")? {
            config.record_wall_time = v;
        }

        for kind in EstimatorKind::ALL {
            let section = kind.key();
            let mut ov = EstimatorOverrides::default();
            ov.horizons = map.get_f64_list(section, "horizons")?;
            match kind {
                EstimatorKind::Ratio => {
                    ov.epsilon = map.get_f64(section, "epsilon")?;
                    if let Some(s) = map.get_str(section, "scheme")? {
                        ov.scheme = Some(parse_sum_scheme(&s)?);
                    }
                    if let Some(s) = map.get_str(section, "shift_mode")? {
                        ov.shift_mode = Some(parse_shift_mode(&s)?);
                    }
                }
                EstimatorKind::FixedPoint => {
                    ov.tol = map.get_f64(section, "tol")?;
                    ov.max_iter = map.get_usize(section, "max_iter")?;
                    ov.theta_init = map.get_f64(section, "theta_init")?;
                }
                EstimatorKind::Iterative => {
                    ov.n_iters = map.get_usize(section, "n_iters")?;
                    ov.theta_init = map.get_f64(section, "theta_init")?;
                }
                EstimatorKind::Contrast => {
                    ov.grid_lo = map.get_f64_list(section, "lo")?;
                    ov.grid_hi = map.get_f64_list(section, "hi")?;
                    ov.grid_mesh = map.get_f64_list(section, "mesh")?;
                }
            }
            config.overrides.insert(section, ov);
        }

        map.ensure_all_used()?;
        let model = DriftModel::by_key(&config.model)?;
        config.validate(&model)?;
        Ok(config)
    }

    fn overrides_for(&self, kind: EstimatorKind) -> EstimatorOverrides {
        self.overrides.get(kind.key()).cloned().unwrap_or_default()
    }

    pub fn validate(&self, model: &DriftModel) -> Result<()> {
        let p = model.p();
        if self.theta0.len() != p {
            return Err(Error::Config(format!(
                "theta0 has {} entries but model `{}` has p = {p}",
                self.theta0.len(),
                model.name()
            )));
        }
        if self.h_list.is_empty() {
            return Err(Error::Config("h_list must not be empty".into()));
        }
        for &h in &self.h_list {
            HurstParameter::new(h)?;
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n == 0) {
            return Err(Error::Config(
                "n_list must contain at least one positive particle count".into(),
            ));
        }
        if self.mc_reps == 0 {
            return Err(Error::Config("mc_reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if self.n_steps.is_some() && self.mesh.is_some() {
            return Err(Error::Config(
                "give either n_steps or mesh, not both".into(),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        for kind in self.estimators.iter().copied() {
            let ov = self.overrides_for(kind);
            if let Some(hs) = &ov.horizons {
                if hs.len() != self.h_list.len() {
                    return Err(Error::Config(format!(
                        "[{}] horizons has {} entries but h_list has {}",
                        kind.key(),
                        hs.len(),
                        self.h_list.len()
                    )));
                }
            }
            match kind {
                EstimatorKind::Ratio => {
                    let eps = ov.epsilon.unwrap_or(self.epsilon);
                    if !(eps > 0.0) || !eps.is_finite() {
                        return Err(Error::Config(format!(
                            "ratio shift epsilon must be positive, got {eps}"
                        )));
                    }
                }
                EstimatorKind::FixedPoint | EstimatorKind::Iterative => {
                    if p != 1 {
                        return Err(Error::ScalarParameterOnly {
                            estimator: kind.key(),
                            p,
                        });
                    }
                }
                EstimatorKind::Contrast => {
                    let (lo, hi, mesh) = match (&ov.grid_lo, &ov.grid_hi, &ov.grid_mesh) {
                        (Some(l), Some(h), Some(m)) => (l, h, m),
                        _ => {
                            return Err(Error::Config(
                                "contrast estimator needs [contrast] lo, hi, mesh".into(),
                            ))
                        }
                    };
                    if lo.len() != p {
                        return Err(Error::Config(format!(
                            "[contrast] grid has {} axes but model `{}` has p = {p}",
                            lo.len(),
                            model.name()
                        )));
                    }
                    ContrastGrid::new(lo.clone(), hi.clone(), mesh.clone())?;
                }
            }
        }
        Ok(())
    }

    fn steps_for(&self, horizon: f64) -> usize {
        if let Some(n) = self.n_steps {
            n
        } else {
            let mesh = self.mesh.unwrap_or_else(|| default_mesh(&self.model));
            ((horizon / mesh).round() as usize).max(2)
        }
    }
}

/// One aggregated cell of the experiment (one estimator, one (H, N) pair,
/// one θ coordinate).
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub estimator: String,
    pub model: String,
    pub theta_index: usize,
    #[serde(rename = "H")]
    pub hurst: f64,
    #[serde(rename = "N")]
    pub n_particles: usize,
    pub rmse: f64,
    pub bias: f64,
    pub stderr_rmse: f64,
    pub stderr_bias: f64,
    pub reps: usize,
    pub failures: usize,
    pub wall_time_s: f64,
}

/// Fraction of failed replications above which a cell is reported as
/// invalid (all statistics NaN) instead of silently averaging survivors.
const FAILURE_TOLERANCE: f64 = 0.2;

struct ResolvedEstimator {
    kind: EstimatorKind,
    horizons: Vec<f64>,
    steps: Vec<usize>,
    epsilon: f64,
    scheme: SumScheme,
    shift_mode: ShiftMode,
    fp: FixedPointConfig,
    n_iters: Option<usize>,
    grid: Option<ContrastGrid>,
}

fn resolve(config: &ExperimentConfig) -> Result<Vec<ResolvedEstimator>> {
    let mut out = Vec::new();
    for kind in config.estimators.iter().copied() {
        let ov = config.overrides_for(kind);
        let horizons = ov
            .horizons
            .clone()
            .unwrap_or_else(|| vec![config.horizon; config.h_list.len()]);
        let steps: Vec<usize> = horizons.iter().map(|&t| config.steps_for(t)).collect();
        for (&t, &n) in horizons.iter().zip(steps.iter()) {
            // Surface bad (horizon, steps) pairs before any replication runs.
            TimeGrid::new(t, n)?;
        }
        let grid = match kind {
            EstimatorKind::Contrast => Some(ContrastGrid::new(
                ov.grid_lo.clone().unwrap_or_default(),
                ov.grid_hi.clone().unwrap_or_default(),
                ov.grid_mesh.clone().unwrap_or_default(),
            )?),
            _ => None,
        };
        out.push(ResolvedEstimator {
            kind,
            horizons,
            steps,
            epsilon: ov.epsilon.unwrap_or(config.epsilon),
            scheme: ov.scheme.unwrap_or(SumScheme::Trapezoid),
            shift_mode: ov.shift_mode.unwrap_or(config.shift_mode),
            fp: FixedPointConfig {
                tol: ov.tol.unwrap_or(1e-8),
                max_iter: ov.max_iter.unwrap_or(50),
                theta_init: ov.theta_init,
            },
            n_iters: ov.n_iters,
            grid,
        });
    }
    Ok(out)
}

/// Outcome of one estimator on one replication: per-coordinate errors
/// θ̂ − θ⁰, or the failure message.
type RepOutcome = (usize, std::result::Result<Vec<f64>, String>, f64);

#[allow(clippy::too_many_arguments)]
fn run_replication(
    config: &ExperimentConfig,
    model: &DriftModel,
    resolved: &[ResolvedEstimator],
    h: HurstParameter,
    h_idx: usize,
    n_particles: usize,
    n_idx: usize,
    rep: usize,
) -> Vec<RepOutcome> {
    // Estimators with the same (horizon, steps) share one simulated dataset.
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (e_idx, est) in resolved.iter().enumerate() {
        groups
            .entry((est.horizons[h_idx].to_bits(), est.steps[h_idx]))
            .or_default()
            .push(e_idx);
    }

    let mut outcomes = Vec::new();
    for (g_idx, ((t_bits, steps), members)) in groups.into_iter().enumerate() {
        let tags = [
            h_idx as u64,
            n_idx as u64,
            rep as u64,
            g_idx as u64,
        ];
        let noise_tags = [
            rng::purpose::NOISE,
            tags[0],
            tags[1],
            tags[2],
            tags[3],
        ];
        let initial_tags = [
            rng::purpose::INITIAL,
            tags[0],
            tags[1],
            tags[2],
            tags[3],
        ];
        let dataset = (|| -> Result<_> {
            let grid = TimeGrid::new(f64::from_bits(t_bits), steps)?;
            let noise = Arc::new(sample_fbm(
                h,
                &grid,
                n_particles,
                config.master_seed,
                &noise_tags,
            )?);
            let initials =
                config
                    .initial
                    .sample(n_particles, config.master_seed, &initial_tags)?;
            let ensemble = euler_simulate(
                model,
                &config.theta0,
                config.sigma,
                &grid,
                &initials,
                &noise,
            )?;
            Ok(ensemble)
        })();

        let ensemble = match dataset {
            Ok(e) => e,
            Err(err) => {
                let msg = err.to_string();
                for &e_idx in &members {
                    outcomes.push((e_idx, Err(msg.clone()), 0.0));
                }
                continue;
            }
        };

        for &e_idx in &members {
            let est = &resolved[e_idx];
            let start = Instant::now();
            let result = (|| -> Result<Vec<f64>> {
                let estimate = match est.kind {
                    EstimatorKind::Ratio => {
                        let family =
                            simulate_shifted_family(&ensemble, est.epsilon, est.shift_mode)?;
                        ratio_estimator(
                            &family,
                            model,
                            &RatioConfig { scheme: est.scheme },
                        )?
                    }
                    EstimatorKind::FixedPoint => {
                        fixed_point_estimator(&ensemble, model, &est.fp)?
                    }
                    EstimatorKind::Iterative => {
                        let iters = est
                            .n_iters
                            .unwrap_or_else(|| default_iteration_count(n_particles));
                        iterative_estimator(&ensemble, model, iters, est.fp.theta_init)?
                    }
                    EstimatorKind::Contrast => {
                        contrast_estimator(&ensemble, model, est.grid.as_ref().unwrap())?
                    }
                };
                Ok(estimate
                    .theta_hat
                    .iter()
                    .zip(config.theta0.iter())
                    .map(|(hat, truth)| hat - truth)
                    .collect())
            })();
            let wall = if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            outcomes.push((e_idx, result.map_err(|e| e.to_string()), wall));
        }
    }
    outcomes
}

fn cell_statistics(errors: &[f64]) -> (f64, f64, f64, f64) {
    let r = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / r;
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / r;
    let rmse = mean_sq.sqrt();
    if errors.len() < 2 {
        return (rmse, bias, 0.0, 0.0);
    }
    let var = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (r - 1.0);
    let stderr_bias = (var / r).sqrt();
    let var_sq = errors
        .iter()
        .map(|e| (e * e - mean_sq).powi(2))
        .sum::<f64>()
        / (r - 1.0);
    // Delta method: se(√m) = se(m)/(2√m).
    let stderr_rmse = if rmse > 0.0 {
        (var_sq / r).sqrt() / (2.0 * rmse)
    } else {
        0.0
    };
    (rmse, bias, stderr_rmse, stderr_bias)
}

/// Run the full sweep. Rows come back sorted by (estimator order in the
/// config, H order, N order, θ coordinate).
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let model = DriftModel::by_key(&config.model)?;
    config.validate(&model)?;
    let resolved = resolve(config)?;
    let p = model.p();

    let hursts: Vec<HurstParameter> = config
        .h_list
        .iter()
        .map(|&h| HurstParameter::new(h))
        .collect::<Result<_>>()?;

    let mut tasks = Vec::new();
    for h_idx in 0..config.h_list.len() {
        for n_idx in 0..config.n_list.len() {
            for rep in 0..config.mc_reps {
                tasks.push((h_idx, n_idx, rep));
            }
        }
    }
    let outputs: Vec<Vec<RepOutcome>> = tasks
        .par_iter()
        .map(|&(h_idx, n_idx, rep)| {
            run_replication(
                config,
                &model,
                &resolved,
                hursts[h_idx],
                h_idx,
                config.n_list[n_idx],
                n_idx,
                rep,
            )
        })
        .collect();

    #[derive(Default, Clone)]
    struct Cell {
        errors: Vec<Vec<f64>>,
        failures: usize,
        wall: f64,
    }
    let n_h = config.h_list.len();
    let n_n = config.n_list.len();
    let mut cells = vec![Cell::default(); resolved.len() * n_h * n_n];
    for (task_idx, outcomes) in outputs.into_iter().enumerate() {
        let (h_idx, n_idx, _rep) = tasks[task_idx];
        for (e_idx, res, wall) in outcomes {
            let cell = &mut cells[(e_idx * n_h + h_idx) * n_n + n_idx];
            cell.wall += wall;
            match res {
                Ok(errors) => cell.errors.push(errors),
                Err(_) => cell.failures += 1,
            }
        }
    }

    let mut rows = Vec::new();
    for (e_idx, est) in resolved.iter().enumerate() {
        for h_idx in 0..n_h {
            for n_idx in 0..n_n {
                let cell = &cells[(e_idx * n_h + h_idx) * n_n + n_idx];
                let total = cell.errors.len() + cell.failures;
                let invalid = cell.failures as f64 > FAILURE_TOLERANCE * total as f64;
                for coord in 0..p {
                    let (rmse, bias, se_rmse, se_bias) = if invalid || cell.errors.is_empty() {
                        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                    } else {
                        let series: Vec<f64> =
                            cell.errors.iter().map(|e| e[coord]).collect();
                        cell_statistics(&series)
                    };
                    rows.push(ResultRow {
                        estimator: est.kind.key().to_string(),
                        model: config.model.clone(),
                        theta_index: coord,
                        hurst: config.h_list[h_idx],
                        n_particles: config.n_list[n_idx],
                        rmse,
                        bias,
                        stderr_rmse: se_rmse,
                        stderr_bias: se_bias,
                        reps: cell.errors.len(),
                        failures: cell.failures,
                        wall_time_s: cell.wall,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn from_key(key: &str) -> Result<Self> {
        match key {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!(
                "unknown output format `{other}`; expected csv or json"
            ))),
        }
    }
}

pub const RESULT_CSV_HEADER: &str =
    "estimator,model,theta_index,H,N,rmse,bias,stderr_rmse,stderr_bias,reps,failures,wall_time_s";

/// Render rows to a string; the CSV float fields use the shortest
/// round-tripping decimal form, so emission is bit-stable and re-parsable.
pub fn render_results(rows: &[ResultRow], format: OutputFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no result rows to emit".into()));
    }
    match format {
        OutputFormat::Csv => {
            let mut out = String::from(RESULT_CSV_HEADER);
            out.push('\n');
            for row in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    row.estimator,
                    row.model,
                    row.theta_index,
                    row.hurst,
                    row.n_particles,
                    row.rmse,
                    row.bias,
                    row.stderr_rmse,
                    row.stderr_bias,
                    row.reps,
                    row.failures,
                    row.wall_time_s
                );
            }
            Ok(out)
        }
        OutputFormat::Json => {
            let mut out = serde_json::to_string_pretty(rows)
                .map_err(|e| Error::InvalidInput(format!("json serialization failed: {e}")))?;
            out.push('\n');
            Ok(out)
        }
    }
}

pub fn emit_results(rows: &[ResultRow], path: &Path, format: OutputFormat) -> Result<()> {
    let rendered = render_results(rows, format)?;
    std::fs::write(path, rendered).map_err(|e| Error::io(path, e))
}

fn short(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x.abs() >= 1e-3 && x.abs() < 1e4 {
        format!("{x:.3}")
    } else {
        format!("{x:.1e}")
    }
}

/// Text table in the "RMSE (Bias)" layout, one line per
/// (estimator, θ coordinate, H), one column per N.
pub fn format_summary(rows: &[ResultRow]) -> String {
    let mut n_values: Vec<usize> = Vec::new();
    for row in rows {
        if !n_values.contains(&row.n_particles) {
            n_values.push(row.n_particles);
        }
    }
    let mut lines: Vec<(String, BTreeMap<usize, String>)> = Vec::new();
    for row in rows {
        let label = format!(
            "{:<12} {:<10} theta[{}]  H={:<5}",
            row.estimator, row.model, row.theta_index, row.hurst
        );
        if !lines.iter().any(|(l, _)| *l == label) {
            lines.push((label.clone(), BTreeMap::new()));
        }
        let cell = if row.rmse.is_nan() {
            format!("invalid ({}/{} failed)", row.failures, row.reps + row.failures)
        } else {
            format!("{} ({})", short(row.rmse), short(row.bias))
        };
        let entry = lines.iter_mut().find(|(l, _)| *l == label).unwrap();
        entry.1.insert(row.n_particles, cell);
    }

    let mut out = String::from("RMSE (Bias)\n");
    let _ = write!(out, "{:<44}", "");
    for n in &n_values {
        let _ = write!(out, "{:<22}", format!("N={n}"));
    }
    out.push('\n');
    for (label, cells) in lines {
        let _ = write!(out, "{label:<44}");
        for n in &n_values {
            let text = cells.get(n).map(String::as_str).unwrap_or("-");
            let _ = write!(out, "{text:<22}");
        }
        out.push('\n');
    }
    out
}
