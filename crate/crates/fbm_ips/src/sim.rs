//! Euler simulation of the interacting particle system, initial-condition
//! shifted couplings, and a McKean-Vlasov limit proxy.
//!
//! All particles share one explicit Euler scheme with left-endpoint drift:
//!
//! ```text
//! X^i_{j+1} = X^i_j + Δ ⟨θ, b(X^i_j, μ^N_j)⟩ + σ (B^i_{j+1} - B^i_j)
//! ```
//!
//! Couplings never resample noise: a shifted system or a limit-proxy tracked
//! particle reuses the exact increment arrays of the ensemble it is coupled
//! to, which is what makes the pathwise gap diagnostics meaningful.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fbm::{sample_fbm, FbmEnsemble, TimeGrid};
use crate::models::{DriftModel, MeasureSummary};
use crate::rng;

/// How initial particle positions are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// iid standard normal draws, one substream per particle.
    StdNormal,
    Constant(f64),
    /// Explicit positions; length must match the particle count.
    Values(Vec<f64>),
}

impl InitialCondition {
    /// Resolve to concrete positions for `n` particles. Deterministic in
    /// `(master_seed, tags)`; the particle index is appended per draw.
    pub fn sample(&self, n: usize, master_seed: u64, tags: &[u64]) -> Result<Vec<f64>> {
        match self {
            InitialCondition::StdNormal => {
                let base = rng::derive_seed(master_seed, tags);
                Ok((0..n)
                    .map(|i| {
                        let mut stream = rng::stream_rng(base, &[i as u64]);
                        stream.sample(StandardNormal)
                    })
                    .collect())
            }
            InitialCondition::Constant(v) => Ok(vec![*v; n]),
            InitialCondition::Values(vals) => {
                if vals.len() != n {
                    Err(Error::InvalidInput(format!(
                        "initial condition lists {} values but {} particles were requested",
                        vals.len(),
                        n
                    )))
                } else {
                    Ok(vals.clone())
                }
            }
        }
    }
}

/// Simulated states of N particles on a grid, with per-node measure
/// summaries and a handle on the driving noise.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    model: DriftModel,
    theta: Vec<f64>,
    sigma: f64,
    grid: TimeGrid,
    n_particles: usize,
    /// Row-major: particle i occupies nodes [i*(n+1), (i+1)*(n+1)).
    states: Vec<f64>,
    summaries: Vec<MeasureSummary>,
    noise: Arc<FbmEnsemble>,
}

impl ParticleEnsemble {
    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    /// States of particle i at every node.
    pub fn path(&self, i: usize) -> &[f64] {
        let w = self.grid.n_nodes();
        &self.states[i * w..(i + 1) * w]
    }

    pub fn state(&self, i: usize, j: usize) -> f64 {
        self.states[i * self.grid.n_nodes() + j]
    }

    /// Empirical-measure summary at node j.
    pub fn summary(&self, j: usize) -> &MeasureSummary {
        &self.summaries[j]
    }

    pub fn summaries(&self) -> &[MeasureSummary] {
        &self.summaries
    }

    /// The driving fBm (shared, not copied, by coupled systems).
    pub fn noise(&self) -> &Arc<FbmEnsemble> {
        &self.noise
    }

    /// Write states as CSV with header `particle,node,time,state`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut dyn std::io::Write| -> std::io::Result<()> {
            writeln!(w, "particle,node,time,state")?;
            for i in 0..self.n_particles {
                for (j, v) in self.path(i).iter().enumerate() {
                    writeln!(w, "{},{},{},{}", i, j, self.grid.node(j), v)?;
                }
            }
            Ok(())
        };
        write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Core Euler loop. When `external` is given, drift is evaluated against
/// those summaries (limit proxy / frozen shifts) instead of the evolving
/// system's own empirical measure; stored summaries always describe the
/// simulated states themselves.
fn euler_core(
    model: &DriftModel,
    theta: &[f64],
    sigma: f64,
    grid: &TimeGrid,
    initial_values: &[f64],
    noise: &Arc<FbmEnsemble>,
    external: Option<&[MeasureSummary]>,
) -> Result<ParticleEnsemble> {
    let n_particles = initial_values.len();
    let n = grid.n_steps();
    let w = grid.n_nodes();
    let dt = grid.dt();

    let mut states = vec![0.0; n_particles * w];
    for (i, &x0) in initial_values.iter().enumerate() {
        states[i * w] = x0;
    }

    let mut summaries: Vec<MeasureSummary> = Vec::with_capacity(w);
    let mut column = vec![0.0; n_particles];
    for j in 0..=n {
        for i in 0..n_particles {
            column[i] = states[i * w + j];
        }
        summaries.push(MeasureSummary::from_sample(&column)?);
        if j == n {
            break;
        }
        let measure = match external {
            Some(ext) => &ext[j],
            None => summaries.last().expect("just pushed"),
        };
        for i in 0..n_particles {
            let x = states[i * w + j];
            let drift = model.drift(theta, x, measure);
            let next = x + dt * drift + sigma * noise.increments(i)[j];
            if !next.is_finite() {
                return Err(Error::NonFiniteState {
                    particle: i,
                    node: j + 1,
                    value: next,
                });
            }
            states[i * w + j + 1] = next;
        }
    }

    Ok(ParticleEnsemble {
        model: model.clone(),
        theta: theta.to_vec(),
        sigma,
        grid: grid.clone(),
        n_particles,
        states,
        summaries,
        noise: Arc::clone(noise),
    })
}

/// Simulate the N-particle interacting system.
pub fn euler_simulate(
    model: &DriftModel,
    theta: &[f64],
    sigma: f64,
    grid: &TimeGrid,
    initial_values: &[f64],
    noise: &Arc<FbmEnsemble>,
) -> Result<ParticleEnsemble> {
    if theta.len() != model.p() {
        return Err(Error::InvalidInput(format!(
            "theta has {} entries but model `{}` has p = {}",
            theta.len(),
            model.name(),
            model.p()
        )));
    }
    if noise.n_paths() != initial_values.len() {
        return Err(Error::InvalidInput(format!(
            "noise carries {} paths but {} particles were requested",
            noise.n_paths(),
            initial_values.len()
        )));
    }
    if noise.grid() != grid {
        return Err(Error::InvalidInput(
            "noise grid does not match the simulation grid".into(),
        ));
    }
    euler_core(model, theta, sigma, grid, initial_values, noise, None)
}

/// Shift-coupling mode: `Exact` re-evolves the whole system per shifted
/// particle; `Frozen` re-evolves only the shifted particle against the base
/// system's measure summaries (O(N) cheaper, error O(ε/N) per particle).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    Exact,
    Frozen,
}

/// The base system plus, for each k, the system in which particle k started
/// epsilon higher. All systems share the base noise bit-for-bit.
#[derive(Debug, Clone)]
pub struct ShiftedFamily {
    base: ParticleEnsemble,
    epsilon: f64,
    mode: ShiftMode,
    shifted: Vec<ParticleEnsemble>,
}

impl ShiftedFamily {
    pub fn base(&self) -> &ParticleEnsemble {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> ShiftMode {
        self.mode
    }

    /// The system where particle k's initial condition was shifted.
    pub fn shifted(&self, k: usize) -> &ParticleEnsemble {
        &self.shifted[k]
    }

    /// Difference quotient (X^{k,+ε}_j - X^k_j)/ε of the shifted particle.
    pub fn diff_quotient(&self, k: usize, node: usize) -> f64 {
        (self.shifted[k].state(k, node) - self.base.state(k, node)) / self.epsilon
    }

    /// Write base and every shifted system; shifted files get a `_shift<k>`
    /// suffix before the extension.
    pub fn export_csv(&self, base_path: &Path) -> Result<()> {
        self.base.export_csv(base_path)?;
        let stem = base_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("ensemble");
        let ext = base_path.extension().and_then(|s| s.to_str());
        for (k, system) in self.shifted.iter().enumerate() {
            let name = match ext {
                Some(e) => format!("{stem}_shift{k}.{e}"),
                None => format!("{stem}_shift{k}"),
            };
            system.export_csv(&base_path.with_file_name(name))?;
        }
        Ok(())
    }
}

/// Build the family of initial-condition shifted systems for `base`.
pub fn simulate_shifted_family(
    base: &ParticleEnsemble,
    epsilon: f64,
    mode: ShiftMode,
) -> Result<ShiftedFamily> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(format!(
            "shift epsilon must be positive and finite, got {epsilon}"
        )));
    }
    let n_particles = base.n_particles();
    let w = base.grid().n_nodes();
    let base_initials: Vec<f64> = (0..n_particles).map(|i| base.state(i, 0)).collect();

    let mut shifted = Vec::with_capacity(n_particles);
    for k in 0..n_particles {
        let mut initials = base_initials.clone();
        initials[k] += epsilon;
        let system = match mode {
            ShiftMode::Exact => euler_core(
                base.model(),
                base.theta(),
                base.sigma(),
                base.grid(),
                &initials,
                base.noise(),
                None,
            )?,
            ShiftMode::Frozen => {
                // Only particle k moves; everything else is copied from base.
                let single = euler_core(
                    base.model(),
                    base.theta(),
                    base.sigma(),
                    &base.grid().clone(),
                    &[initials[k]],
                    &single_path_noise(base.noise(), k),
                    Some(base.summaries()),
                )?;
                let mut states = base.states.clone();
                states[k * w..(k + 1) * w].copy_from_slice(single.path(0));
                rebuild_ensemble(base, states)?
            }
        };
        shifted.push(system);
    }
    Ok(ShiftedFamily {
        base: base.clone(),
        epsilon,
        mode,
        shifted,
    })
}

/// Ensemble with replaced states (summaries recomputed so the type invariant
/// keeps holding).
fn rebuild_ensemble(base: &ParticleEnsemble, states: Vec<f64>) -> Result<ParticleEnsemble> {
    let w = base.grid().n_nodes();
    let n_particles = base.n_particles();
    let mut summaries = Vec::with_capacity(w);
    let mut column = vec![0.0; n_particles];
    for j in 0..w {
        for i in 0..n_particles {
            column[i] = states[i * w + j];
        }
        summaries.push(MeasureSummary::from_sample(&column)?);
    }
    Ok(ParticleEnsemble {
        model: base.model.clone(),
        theta: base.theta.clone(),
        sigma: base.sigma,
        grid: base.grid.clone(),
        n_particles,
        states,
        summaries,
        noise: Arc::clone(&base.noise),
    })
}

/// View of one path of an existing noise ensemble as its own ensemble.
fn single_path_noise(noise: &Arc<FbmEnsemble>, k: usize) -> Arc<FbmEnsemble> {
    Arc::new(noise.slice_paths(k, 1))
}

/// Interacting system together with its limit-proxy coupling.
#[derive(Debug, Clone)]
pub struct LimitProxy {
    /// N tracked particles on the interacting system's noise, with drift
    /// against the reference measure: approximately iid copies of the
    /// McKean-Vlasov limit, coupled pathwise to the interacting particles.
    pub tracked: ParticleEnsemble,
    /// Auxiliary n_ref-particle interacting system on independent noise whose
    /// empirical measure stands in for the limit law.
    pub reference: ParticleEnsemble,
}

/// Default auxiliary ensemble size for a given tracked count.
pub fn default_n_ref(n_tracked: usize) -> usize {
    (10 * n_tracked).max(300)
}

/// Evolve the limit proxy for an ensemble coupled to `noise`/`initials`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_limit_proxy(
    model: &DriftModel,
    theta: &[f64],
    sigma: f64,
    grid: &TimeGrid,
    initial_values: &[f64],
    noise: &Arc<FbmEnsemble>,
    n_ref: usize,
    initial: &InitialCondition,
    master_seed: u64,
    ref_tags: &[u64],
) -> Result<LimitProxy> {
    let mut noise_tags = ref_tags.to_vec();
    noise_tags.push(rng::purpose::REFERENCE_NOISE);
    let mut init_tags = ref_tags.to_vec();
    init_tags.push(rng::purpose::REFERENCE_INITIAL);

    let ref_noise = Arc::new(sample_fbm(
        noise.hurst(),
        grid,
        n_ref,
        master_seed,
        &noise_tags,
    )?);
    let ref_initials = initial.sample(n_ref, master_seed, &init_tags)?;
    let reference = euler_core(model, theta, sigma, grid, &ref_initials, &ref_noise, None)?;
    let tracked = euler_core(
        model,
        theta,
        sigma,
        grid,
        initial_values,
        noise,
        Some(reference.summaries()),
    )?;
    Ok(LimitProxy { tracked, reference })
}

/// Exact 1-D Wasserstein-2 distance between sorted samples. Equal sizes use
/// the order-statistics formula; unequal sizes couple through the common
/// refinement of the two empirical quantile functions.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample {
            context: "wasserstein2_1d",
        });
    }
    debug_assert!(a.windows(2).all(|w| w[0] <= w[1]), "first sample not sorted");
    debug_assert!(b.windows(2).all(|w| w[0] <= w[1]), "second sample not sorted");

    if a.len() == b.len() {
        let n = a.len() as f64;
        let sum: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        return Ok((sum / n).sqrt());
    }

    let (n, m) = (a.len(), b.len());
    let mut acc = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0; // quantile level reached so far
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += d * d * (next - u);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(acc.sqrt())
}

impl FbmEnsemble {
    /// Copy of `count` paths starting at `first` as a standalone ensemble.
    pub fn slice_paths(&self, first: usize, count: usize) -> FbmEnsemble {
        let mut increments = Vec::with_capacity(count * self.grid().n_steps());
        for p in first..first + count {
            increments.extend_from_slice(self.increments(p));
        }
        FbmEnsemble::from_increments(
            self.hurst(),
            self.grid().clone(),
            count,
            self.method(),
            increments,
        )
    }
}
