//! Malliavin-derivative ODEs along simulated paths, the exponential
//! surrogate, initial-condition derivatives, and propagation-of-chaos rate
//! diagnostics.
//!
//! For the interacting system the derivative D^j_s X^i solves a linear ODE
//! coupling all particles of the column j:
//!
//! ```text
//! d/dt D^j_s X^i_t = ⟨θ, ∂_x b⟩ D^j_s X^i_t
//!                  + (1/N) Σ_k ⟨θ, ∂_μ b(X^i_t, μ_t)(X^k_t)⟩ D^j_s X^k_t
//! ```
//!
//! with initial condition σ·1_{i=j} at t=s, integrated by explicit Euler on
//! the simulation grid. When ∂_μ b does not depend on its tail argument the
//! coupling collapses to a running column sum and one column costs O(N·n).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{sample_fbm, HurstParameter, TimeGrid};
use crate::models::DriftModel;
use crate::rng;
use crate::sim::{
    default_n_ref, euler_simulate, simulate_limit_proxy, InitialCondition, LimitProxy,
    ParticleEnsemble,
};

/// Selected Malliavin derivatives D^j_s X^i as arrays over t-nodes.
///
/// Entries are exactly zero strictly before the s node; at t = s the diagonal
/// starts at σ and off-diagonal entries at 0.
#[derive(Debug, Clone)]
pub struct DerivativePanel {
    grid: TimeGrid,
    s_index: usize,
    entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl DerivativePanel {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn s_index(&self) -> usize {
        self.s_index
    }

    /// D^j_s X^i over all t-nodes, if the pair was requested.
    pub fn entry(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.entries.get(&(i, j)).map(|v| v.as_slice())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }
}

/// Integrate one derivative column {D^j_s X^k}_k with the given start values
/// placed at node `s_index`. Returns a flat N x (n+1) row-major array,
/// zero before the start node.
fn integrate_column(
    ensemble: &ParticleEnsemble,
    theta: &[f64],
    s_index: usize,
    init: &[f64],
) -> Vec<f64> {
    let n_particles = ensemble.n_particles();
    let n = ensemble.grid().n_steps();
    let w = ensemble.grid().n_nodes();
    let dt = ensemble.grid().dt();
    let model = ensemble.model();

    let mut out = vec![0.0; n_particles * w];
    let mut current = init.to_vec();
    for (k, &v) in init.iter().enumerate() {
        out[k * w + s_index] = v;
    }
    let mut next = vec![0.0; n_particles];
    for t in s_index..n {
        let summary = ensemble.summary(t);
        if model.dmu_constant_in_v() {
            // ∂_μ b(x, μ)(v) does not depend on v: the interaction term is
            // ⟨θ, ∂_μ b(x_i, μ)⟩ · (Σ_k D^k)/N.
            let col_sum: f64 = current.iter().sum();
            let mean_d = col_sum / n_particles as f64;
            for i in 0..n_particles {
                let x = ensemble.state(i, t);
                let own = model.drift_dx(theta, x, summary) * current[i];
                let coupling = model.drift_dmu(theta, x, summary, x) * mean_d;
                next[i] = current[i] + dt * (own + coupling);
            }
        } else {
            for i in 0..n_particles {
                let x = ensemble.state(i, t);
                let own = model.drift_dx(theta, x, summary) * current[i];
                let mut coupling = 0.0;
                for k in 0..n_particles {
                    coupling += model.drift_dmu(theta, x, summary, ensemble.state(k, t))
                        * current[k];
                }
                next[i] = current[i] + dt * (own + coupling / n_particles as f64);
            }
        }
        std::mem::swap(&mut current, &mut next);
        for i in 0..n_particles {
            out[i * w + t + 1] = current[i];
        }
    }
    out
}

/// Malliavin derivatives of the interacting system for the requested (i, j)
/// pairs, perturbing at node `s_index`. Any pair with column j forces the
/// full column to be integrated (the dynamics couple all particles); columns
/// are integrated once and shared.
pub fn malliavin_interacting(
    ensemble: &ParticleEnsemble,
    theta: &[f64],
    s_index: usize,
    pairs: &[(usize, usize)],
) -> Result<DerivativePanel> {
    let n_particles = ensemble.n_particles();
    let w = ensemble.grid().n_nodes();
    if s_index >= w {
        return Err(Error::InvalidInput(format!(
            "s_index {} out of range for a grid with {} nodes",
            s_index, w
        )));
    }
    for &(i, j) in pairs {
        if i >= n_particles || j >= n_particles {
            return Err(Error::InvalidInput(format!(
                "derivative pair ({i}, {j}) out of range for {n_particles} particles"
            )));
        }
    }

    let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(_, j) in pairs {
        columns.entry(j).or_insert_with(|| {
            let mut init = vec![0.0; n_particles];
            init[j] = ensemble.sigma();
            integrate_column(ensemble, theta, s_index, &init)
        });
    }

    let mut entries = BTreeMap::new();
    for &(i, j) in pairs {
        let col = &columns[&j];
        entries.insert((i, j), col[i * w..(i + 1) * w].to_vec());
    }
    Ok(DerivativePanel {
        grid: ensemble.grid().clone(),
        s_index,
        entries,
    })
}

/// Per-particle cumulative drift slopes with O(1) queries of
/// σ·exp(A(t) − A(s)).
#[derive(Debug, Clone)]
pub struct ExponentialSurrogate {
    sigma: f64,
    grid: TimeGrid,
    n_particles: usize,
    /// Row-major N x (n+1): A^i(t_j) = Σ_{k<j} Δ·⟨θ, ∂_x b(X^i_{t_k}, μ_{t_k})⟩.
    cumulative: Vec<f64>,
}

impl ExponentialSurrogate {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    /// Cumulative integrated drift slope of particle i at every node.
    pub fn cumulative(&self, i: usize) -> &[f64] {
        let w = self.grid.n_nodes();
        &self.cumulative[i * w..(i + 1) * w]
    }

    /// σ·exp(A^i(t) − A^i(s)) for node indices s ≤ t.
    pub fn value(&self, i: usize, s_index: usize, t_index: usize) -> f64 {
        debug_assert!(s_index <= t_index);
        let a = self.cumulative(i);
        self.sigma * (a[t_index] - a[s_index]).exp()
    }
}

/// Build cumulative arrays from explicit per-node slopes (left-Riemann).
fn surrogate_from_slopes(
    sigma: f64,
    grid: &TimeGrid,
    n_particles: usize,
    slope: impl Fn(usize, usize) -> f64,
) -> ExponentialSurrogate {
    let n = grid.n_steps();
    let w = grid.n_nodes();
    let dt = grid.dt();
    let mut cumulative = vec![0.0; n_particles * w];
    for i in 0..n_particles {
        let mut acc = 0.0;
        for j in 0..n {
            acc += dt * slope(i, j);
            cumulative[i * w + j + 1] = acc;
        }
    }
    ExponentialSurrogate {
        sigma,
        grid: grid.clone(),
        n_particles,
        cumulative,
    }
}

/// Exponential surrogate for the interacting system: slopes are
/// ⟨θ, ∂_x b(X^i, μ^N)⟩ against the system's own empirical measure.
pub fn exponential_surrogate(ensemble: &ParticleEnsemble, theta: &[f64]) -> ExponentialSurrogate {
    let model = ensemble.model().clone();
    surrogate_from_slopes(
        ensemble.sigma(),
        ensemble.grid(),
        ensemble.n_particles(),
        |i, j| model.drift_dx(theta, ensemble.state(i, j), ensemble.summary(j)),
    )
}

/// Malliavin derivative of the limit-proxy tracked particles:
/// D_s X̄^i_t = σ·exp(∫_s^t ⟨θ, ∂_x b(X̄^i_r, μ̄_r)⟩ dr) with the reference
/// summaries standing in for the limit law; off-diagonal derivatives vanish.
pub fn malliavin_independent(
    proxy: &LimitProxy,
    theta: &[f64],
    model: &DriftModel,
) -> ExponentialSurrogate {
    let tracked = &proxy.tracked;
    let reference = &proxy.reference;
    surrogate_from_slopes(
        tracked.sigma(),
        tracked.grid(),
        tracked.n_particles(),
        |i, j| model.drift_dx(theta, tracked.state(i, j), reference.summary(j)),
    )
}

/// Sensitivity ∂_{x_0^j} X^i_t of every particle to particle j's initial
/// position: the same coupled linear ODE as the Malliavin column, started at
/// t=0 from the indicator 1_{i=j}. Returned as a flat N x (n+1) array.
pub fn initial_condition_derivative(
    ensemble: &ParticleEnsemble,
    theta: &[f64],
    shift_particle: usize,
) -> Result<Vec<f64>> {
    let n_particles = ensemble.n_particles();
    if shift_particle >= n_particles {
        return Err(Error::InvalidInput(format!(
            "shift particle {shift_particle} out of range for {n_particles} particles"
        )));
    }
    let mut init = vec![0.0; n_particles];
    init[shift_particle] = 1.0;
    Ok(integrate_column(ensemble, theta, 0, &init))
}

/// One row of the propagation-of-chaos rate table.
#[derive(Debug, Clone)]
pub struct PocRow {
    pub quantity: &'static str,
    pub n_particles: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub slope: f64,
    pub slope_stderr: f64,
}

#[derive(Debug, Clone)]
pub struct PocReport {
    pub rows: Vec<PocRow>,
}

impl PocReport {
    /// Fitted log-log slope for one quantity.
    pub fn slope(&self, quantity: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.quantity == quantity)
            .map(|r| r.slope)
    }

    /// Write rows as CSV with header `quantity,N,estimate,stderr,slope,slope_stderr`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut dyn std::io::Write| -> std::io::Result<()> {
            writeln!(w, "quantity,N,estimate,stderr,slope,slope_stderr")?;
            for r in &self.rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.quantity, r.n_particles, r.estimate, r.stderr, r.slope, r.slope_stderr
                )?;
            }
            Ok(())
        };
        write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub const POC_QUANTITIES: [&str; 4] = [
    "particle_gap",
    "offdiag_deriv",
    "diag_deriv_gap",
    "dz_gap",
];

/// Per-replication Monte Carlo estimates underlying the rate table.
struct RepMeasurement {
    particle_gap: f64,
    offdiag_deriv: f64,
    diag_deriv_gap: f64,
    dz_gap: f64,
}

fn measure_one_rep(
    model: &DriftModel,
    theta: &[f64],
    sigma: f64,
    grid: &TimeGrid,
    hurst: HurstParameter,
    n_particles: usize,
    seed: u64,
    tags: &[u64],
) -> Result<RepMeasurement> {
    let mut noise_tags = tags.to_vec();
    noise_tags.push(rng::purpose::NOISE);
    let mut init_tags = tags.to_vec();
    init_tags.push(rng::purpose::INITIAL);

    let noise = std::sync::Arc::new(sample_fbm(hurst, grid, n_particles, seed, &noise_tags)?);
    let initials = InitialCondition::StdNormal.sample(n_particles, seed, &init_tags)?;
    let ensemble = euler_simulate(model, theta, sigma, grid, &initials, &noise)?;
    let proxy = simulate_limit_proxy(
        model,
        theta,
        sigma,
        grid,
        &initials,
        &noise,
        default_n_ref(n_particles),
        &InitialCondition::StdNormal,
        seed,
        tags,
    )?;

    let n = grid.n_steps();
    let w = grid.n_nodes();

    // (a) mean over particles of sup_t |X^{i,N} - tracked X̄^i|.
    let mut particle_gap = 0.0;
    for i in 0..n_particles {
        let mut sup = 0.0f64;
        for j in 0..w {
            sup = sup.max((ensemble.state(i, j) - proxy.tracked.state(i, j)).abs());
        }
        particle_gap += sup;
    }
    particle_gap /= n_particles as f64;

    // (b) column j = 0 at s = 0: mean over i ≠ 0 of sup_t |D^0_0 X^i|.
    let mut init0 = vec![0.0; n_particles];
    init0[0] = sigma;
    let column0 = integrate_column(&ensemble, theta, 0, &init0);
    let mut offdiag_deriv = 0.0;
    for i in 1..n_particles {
        let mut sup = 0.0f64;
        for j in 0..w {
            sup = sup.max(column0[i * w + j].abs());
        }
        offdiag_deriv += sup;
    }
    offdiag_deriv /= (n_particles - 1) as f64;

    // (c) + (d): diagonal derivatives per particle at probe s nodes.
    let independent = malliavin_independent(&proxy, theta, model);
    let surrogate = exponential_surrogate(&ensemble, theta);
    let probes = [0, n / 4, n / 2, 3 * n / 4];
    let mut diag_deriv_gap = 0.0;
    let mut dz_gap = 0.0f64;
    for &s_index in &probes {
        for i in 0..n_particles {
            let mut init = vec![0.0; n_particles];
            init[i] = sigma;
            let column = integrate_column(&ensemble, theta, s_index, &init);
            let diag = &column[i * w..(i + 1) * w];
            if s_index == 0 {
                let mut sup = 0.0f64;
                for t in 0..w {
                    sup = sup.max((diag[t] - independent.value(i, 0, t)).abs());
                }
                diag_deriv_gap += sup;
            }
            for t in s_index..w {
                dz_gap = dz_gap.max((diag[t] - surrogate.value(i, s_index, t)).abs());
            }
        }
    }
    diag_deriv_gap /= n_particles as f64;

    Ok(RepMeasurement {
        particle_gap,
        offdiag_deriv,
        diag_deriv_gap,
        dz_gap,
    })
}

/// Least-squares slope of ln(estimate) against ln(N), with a delta-method
/// standard error from the per-level standard errors. NaN when any estimate
/// is non-positive (log undefined; happens e.g. at θ = 0 where gaps vanish).
fn fit_loglog_slope(ns: &[usize], estimates: &[f64], stderrs: &[f64]) -> (f64, f64) {
    if estimates.iter().any(|&e| !(e > 0.0)) {
        return (f64::NAN, f64::NAN);
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = estimates.iter().map(|&e| e.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let slope: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (x - xbar) * y)
        .sum::<f64>()
        / sxx;
    let var: f64 = xs
        .iter()
        .zip(estimates.iter().zip(stderrs.iter()))
        .map(|(x, (e, se))| {
            let wgt = (x - xbar) / sxx;
            let ln_se = se / e;
            wgt * wgt * ln_se * ln_se
        })
        .sum();
    (slope, var.sqrt())
}

/// Monte Carlo propagation-of-chaos rate table: for each N in `n_list`,
/// estimates of the particle gap, the off-diagonal Malliavin derivative, the
/// diagonal interacting-vs-independent derivative gap, and the
/// derivative-vs-surrogate gap, each with a fitted log-log slope in N.
pub fn poc_rate_report(
    model: &DriftModel,
    theta: &[f64],
    sigma: f64,
    grid: &TimeGrid,
    hurst: HurstParameter,
    n_list: &[usize],
    reps: usize,
    seed: u64,
) -> Result<PocReport> {
    if n_list.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "rate fits need at least 3 ensemble sizes, got {}",
            n_list.len()
        )));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }

    // means[level][quantity], stderrs likewise.
    let mut means = Vec::with_capacity(n_list.len());
    let mut stderrs = Vec::with_capacity(n_list.len());
    for (level, &n_particles) in n_list.iter().enumerate() {
        let measurements: Vec<Result<RepMeasurement>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                measure_one_rep(
                    model,
                    theta,
                    sigma,
                    grid,
                    hurst,
                    n_particles,
                    seed,
                    &[rng::purpose::PROBE, level as u64, rep as u64],
                )
            })
            .collect();
        let mut per_quantity = vec![Vec::with_capacity(reps); 4];
        for m in measurements {
            let m = m?;
            per_quantity[0].push(m.particle_gap);
            per_quantity[1].push(m.offdiag_deriv);
            per_quantity[2].push(m.diag_deriv_gap);
            per_quantity[3].push(m.dz_gap);
        }
        let mut level_means = [0.0; 4];
        let mut level_stderrs = [0.0; 4];
        for (q, values) in per_quantity.iter().enumerate() {
            let mean = values.iter().sum::<f64>() / reps as f64;
            let var = if reps > 1 {
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (reps as f64 - 1.0)
            } else {
                0.0
            };
            level_means[q] = mean;
            level_stderrs[q] = (var / reps as f64).sqrt();
        }
        means.push(level_means);
        stderrs.push(level_stderrs);
    }

    let mut rows = Vec::new();
    for (q, quantity) in POC_QUANTITIES.iter().enumerate() {
        let est: Vec<f64> = means.iter().map(|m| m[q]).collect();
        let ses: Vec<f64> = stderrs.iter().map(|s| s[q]).collect();
        let (slope, slope_stderr) = fit_loglog_slope(n_list, &est, &ses);
        for (level, &n_particles) in n_list.iter().enumerate() {
            rows.push(PocRow {
                quantity,
                n_particles,
                estimate: est[level],
                stderr: ses[level],
                slope,
                slope_stderr,
            });
        }
    }
    Ok(PocReport { rows })
}
