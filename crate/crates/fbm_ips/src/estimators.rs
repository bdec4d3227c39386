//! Drift estimators and their shared building blocks.
//!
//! Everything here consumes an already-simulated [`ParticleEnsemble`] (plus a
//! [`ShiftedFamily`] for the ratio estimator) and is pure given its inputs.
//! The common skeleton is
//!
//! ```text
//! θ̂ = Ψ_N^{-1} · (Stratonovich vector − correction)
//! ```
//!
//! where the estimators differ only in how they approximate the Malliavin
//! correction: finite-difference ratios of shifted paths (ratio estimator) or
//! an exponential of the integrated drift slope (fixed-point family). The
//! discrete contrast estimator minimizes a quadratic statistic over a grid
//! instead. At H = 1/2 every φ correction vanishes and the estimators reduce
//! to Ψ_N^{-1} times the forward (Itô) Riemann sum.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::{sample_fbm, HurstParameter, TimeGrid};
use crate::kernels::{integrate_separable, KernelWeights, Region};
use crate::malliavin::{exponential_surrogate, ExponentialSurrogate};
use crate::models::DriftModel;
use crate::rng;
use crate::sim::{simulate_limit_proxy, InitialCondition, ParticleEnsemble, ShiftedFamily};

/// Condition numbers above this are treated as a singular Ψ_N.
const PSI_CONDITION_LIMIT: f64 = 1e12;

/// The p×p normalization matrix with entries
/// Σ_i ∫_0^T b_l(X^i_t, μ^N_t) b_j(X^i_t, μ^N_t) dt (trapezoid in time).
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    entries: DMatrix<f64>,
}

impl PsiMatrix {
    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entry(&self, l: usize, j: usize) -> f64 {
        self.entries[(l, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Ratio of extreme absolute eigenvalues; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        let eigen = self.entries.clone().symmetric_eigen();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for &lambda in eigen.eigenvalues.iter() {
            lo = lo.min(lambda.abs());
            hi = hi.max(lambda.abs());
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Solve Ψ x = rhs by symmetric eigendecomposition, rejecting
    /// ill-conditioned systems (the drift components are then numerically
    /// collinear and the model is not identifiable on this sample).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let cond = self.condition_number();
        if !cond.is_finite() || cond > PSI_CONDITION_LIMIT {
            return Err(Error::IllConditionedPsi { cond });
        }
        let eigen = self.entries.clone().symmetric_eigen();
        let b = DVector::from_column_slice(rhs);
        let projected = eigen.eigenvectors.transpose() * b;
        let scaled = DVector::from_iterator(
            self.p(),
            projected
                .iter()
                .zip(eigen.eigenvalues.iter())
                .map(|(v, l)| v / l),
        );
        let x = &eigen.eigenvectors * scaled;
        Ok(x.iter().copied().collect())
    }
}

/// Trapezoid node weights Δ·(1/2, 1, …, 1, 1/2).
fn trapezoid_weights(grid: &TimeGrid) -> Vec<f64> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut w = vec![dt; n + 1];
    w[0] = 0.5 * dt;
    w[n] = 0.5 * dt;
    w
}

/// Build Ψ_N from an ensemble.
pub fn compute_psi(ensemble: &ParticleEnsemble, model: &DriftModel) -> PsiMatrix {
    let p = model.p();
    let w = trapezoid_weights(ensemble.grid());
    let mut entries = DMatrix::zeros(p, p);
    let mut b_node = vec![0.0; p];
    for i in 0..ensemble.n_particles() {
        for (j, &wj) in w.iter().enumerate() {
            let x = ensemble.state(i, j);
            let summary = ensemble.summary(j);
            for (m, slot) in b_node.iter_mut().enumerate() {
                *slot = model.eval_b(m, x, summary);
            }
            for l in 0..p {
                for m in l..p {
                    entries[(l, m)] += wj * b_node[l] * b_node[m];
                }
            }
        }
    }
    // Mirror the upper triangle so symmetry is exact.
    for l in 0..p {
        for m in 0..l {
            entries[(l, m)] = entries[(m, l)];
        }
    }
    PsiMatrix { entries }
}

/// Endpoint weighting of the Riemann–Stieltjes sums against dX.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumScheme {
    /// Endpoint average ½(b_j + b_{j+1}); the Stratonovich/Young reading.
    Trapezoid,
    /// Left endpoint b_j; the Itô reading, exact at H = 1/2.
    Forward,
}

/// Component m = Σ_i Σ_j weight(b_m)·(X^i_{j+1} − X^i_j).
pub fn drift_sum_vector(
    ensemble: &ParticleEnsemble,
    model: &DriftModel,
    scheme: SumScheme,
) -> Vec<f64> {
    let p = model.p();
    let n = ensemble.grid().n_steps();
    let mut out = vec![0.0; p];
    for i in 0..ensemble.n_particles() {
        let path = ensemble.path(i);
        for j in 0..n {
            let dx = path[j + 1] - path[j];
            for (m, slot) in out.iter_mut().enumerate() {
                let left = model.eval_b(m, path[j], ensemble.summary(j));
                let weight = match scheme {
                    SumScheme::Forward => left,
                    SumScheme::Trapezoid => {
                        0.5 * (left + model.eval_b(m, path[j + 1], ensemble.summary(j + 1)))
                    }
                };
                *slot += weight * dx;
            }
        }
    }
    out
}

/// Trapezoid-weighted Stratonovich vector (the default reading for H > 1/2).
pub fn stratonovich_vector(ensemble: &ParticleEnsemble, model: &DriftModel) -> Vec<f64> {
    drift_sum_vector(ensemble, model, SumScheme::Trapezoid)
}

/// Output of any estimator, with enough diagnostics to audit a run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub estimator: String,
    pub theta_hat: Vec<f64>,
    pub iterations: Option<usize>,
    pub converged: bool,
    #[serde(rename = "contraction_C_T", skip_serializing_if = "Option::is_none")]
    pub contraction_c_t: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RatioConfig {
    pub scheme: SumScheme,
}

impl Default for RatioConfig {
    fn default() -> Self {
        RatioConfig {
            scheme: SumScheme::Trapezoid,
        }
    }
}

/// Finite-difference ratio estimator built from a shifted family:
/// θ̂ = Ψ_N^{-1}·[Stratonovich − correction] with
/// correction_m = Σ_i ∬_{s<t} ∂_x b_m(X^i_t, μ^N_t) · q_t/(q_s ∨ 1) · σ ·
/// φ(t,s) ds dt and q_u the difference quotient of particle i at node u.
pub fn ratio_estimator(
    family: &ShiftedFamily,
    model: &DriftModel,
    config: &RatioConfig,
) -> Result<EstimationResult> {
    let base = family.base();
    let h = base.noise().hurst();
    let psi = compute_psi(base, model);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("psi_condition".into(), psi.condition_number());
    diagnostics.insert("epsilon".into(), family.epsilon());

    if h.value() == 0.5 {
        // Itô branch: the φ correction vanishes identically.
        let vector = drift_sum_vector(base, model, SumScheme::Forward);
        let theta_hat = psi.solve(&vector)?;
        diagnostics.insert("correction_norm".into(), 0.0);
        return Ok(EstimationResult {
            estimator: "ratio".into(),
            theta_hat,
            iterations: None,
            converged: true,
            contraction_c_t: None,
            diagnostics,
        });
    }

    let weights = KernelWeights::build(h, base.grid())?;
    let strat = drift_sum_vector(base, model, config.scheme);
    let p = model.p();
    let n_nodes = base.grid().n_nodes();
    let sigma = base.sigma();

    let per_particle: Vec<Result<Vec<f64>>> = (0..base.n_particles())
        .into_par_iter()
        .map(|i| {
            let mut quotient = vec![0.0; n_nodes];
            let mut inv_guard = vec![0.0; n_nodes];
            for u in 0..n_nodes {
                let q = family.diff_quotient(i, u);
                if !q.is_finite() {
                    return Err(Error::NonFiniteState {
                        particle: i,
                        node: u,
                        value: q,
                    });
                }
                quotient[u] = q;
                inv_guard[u] = 1.0 / q.max(1.0);
            }
            let mut corr = vec![0.0; p];
            let mut g = vec![0.0; n_nodes];
            for (m, slot) in corr.iter_mut().enumerate() {
                for (t, g_t) in g.iter_mut().enumerate() {
                    *g_t = model.eval_dxb(m, base.state(i, t), base.summary(t))
                        * quotient[t]
                        * sigma;
                }
                *slot = integrate_separable(&g, &inv_guard, &weights, Region::LowerTriangle)?;
            }
            Ok(corr)
        })
        .collect();

    let mut correction = vec![0.0; p];
    for corr in per_particle {
        for (slot, c) in correction.iter_mut().zip(corr?.iter()) {
            *slot += c;
        }
    }
    let rhs: Vec<f64> = strat
        .iter()
        .zip(correction.iter())
        .map(|(s, c)| s - c)
        .collect();
    let theta_hat = psi.solve(&rhs)?;
    let corr_norm = correction.iter().map(|c| c * c).sum::<f64>().sqrt();
    diagnostics.insert("correction_norm".into(), corr_norm);
    Ok(EstimationResult {
        estimator: "ratio".into(),
        theta_hat,
        iterations: None,
        converged: true,
        contraction_c_t: None,
        diagnostics,
    })
}

/// Contraction bound for the fixed-point map and the largest horizon on
/// which it holds. `ok` is `None` when the model does not declare the needed
/// bounds (‖∂_x b‖_∞ and the lower drift bound l).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContractionCheck {
    pub c_t: f64,
    pub t_max: f64,
    pub ok: Option<bool>,
}

/// C_T = (‖∂_x b‖²_∞ / l²)·((2H−1)/(2H+1))·T^{2H}·σ and the horizon
/// T_max = (l²/(σ‖∂_x b‖²_∞)·(2H+1)/(2H−1))^{1/(2H)} at which C_T reaches 1.
/// The `ok` verdict is evaluated as T < T_max, which is the same condition as
/// C_T < 1 but exact at the boundary.
pub fn check_contraction(
    model: &DriftModel,
    h: HurstParameter,
    sigma: f64,
    horizon: f64,
) -> ContractionCheck {
    let meta = model.metadata();
    let (sup, lower) = match (meta.dx_b_sup, meta.drift_lower_l) {
        (Some(s), Some(l)) if l > 0.0 => (s, l),
        _ => {
            return ContractionCheck {
                c_t: f64::NAN,
                t_max: f64::NAN,
                ok: None,
            }
        }
    };
    let two_h = h.two_h();
    let ratio = (two_h - 1.0) / (two_h + 1.0);
    let c_t = sup * sup / (lower * lower) * ratio * horizon.powf(two_h) * sigma;
    let t_max = (lower * lower / (sigma * sup * sup) / ratio).powf(1.0 / two_h);
    ContractionCheck {
        c_t,
        t_max,
        ok: Some(horizon < t_max),
    }
}

/// Precomputed state for evaluating the fixed-point map F_N repeatedly.
/// Building costs O(N·n); each `map` evaluation costs O(N·n²) through the
/// separable kernel bilinear form (or O(1) on the H = 1/2 Itô branch, where
/// F_N is constant).
pub struct FixedPointSolver {
    psi: f64,
    strat: f64,
    weights: Option<KernelWeights>,
    /// Per particle: ∂_x b(X^i_t, μ_t)·σ at every node.
    g_base: Vec<Vec<f64>>,
    /// Per particle: unit-θ cumulative drift slope A^i at every node.
    a_unit: Vec<Vec<f64>>,
}

impl FixedPointSolver {
    pub fn new(ensemble: &ParticleEnsemble, model: &DriftModel) -> Result<Self> {
        if model.p() != 1 {
            return Err(Error::ScalarParameterOnly {
                estimator: "fixed_point",
                p: model.p(),
            });
        }
        let unit = exponential_surrogate(ensemble, &[1.0]);
        Self::with_surrogate(ensemble, model, &unit)
    }

    /// Use an externally built surrogate's cumulative arrays (which must hold
    /// the unit-θ integrated drift slope).
    pub fn with_surrogate(
        ensemble: &ParticleEnsemble,
        model: &DriftModel,
        surrogate: &ExponentialSurrogate,
    ) -> Result<Self> {
        if model.p() != 1 {
            return Err(Error::ScalarParameterOnly {
                estimator: "fixed_point",
                p: model.p(),
            });
        }
        let h = ensemble.noise().hurst();
        let psi_matrix = compute_psi(ensemble, model);
        let psi = psi_matrix.entry(0, 0);
        if !(psi > 0.0) {
            return Err(Error::PsiNotPositive { value: psi });
        }
        let (weights, strat) = if h.value() == 0.5 {
            (
                None,
                drift_sum_vector(ensemble, model, SumScheme::Forward)[0],
            )
        } else {
            (
                Some(KernelWeights::build(h, ensemble.grid())?),
                stratonovich_vector(ensemble, model)[0],
            )
        };
        let n_nodes = ensemble.grid().n_nodes();
        let sigma = ensemble.sigma();
        let mut g_base = Vec::with_capacity(ensemble.n_particles());
        let mut a_unit = Vec::with_capacity(ensemble.n_particles());
        for i in 0..ensemble.n_particles() {
            let mut g = vec![0.0; n_nodes];
            for (t, g_t) in g.iter_mut().enumerate() {
                *g_t = model.eval_dxb(0, ensemble.state(i, t), ensemble.summary(t)) * sigma;
            }
            g_base.push(g);
            a_unit.push(surrogate.cumulative(i).to_vec());
        }
        Ok(FixedPointSolver {
            psi,
            strat,
            weights,
            g_base,
            a_unit,
        })
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// One evaluation of F_N(θ).
    pub fn map(&self, theta: f64) -> Result<f64> {
        let weights = match &self.weights {
            None => return Ok(self.strat / self.psi),
            Some(w) => w,
        };
        let corrections: Vec<Result<f64>> = (0..self.g_base.len())
            .into_par_iter()
            .map(|i| {
                let a = &self.a_unit[i];
                let g: Vec<f64> = self.g_base[i]
                    .iter()
                    .zip(a.iter())
                    .map(|(gb, av)| gb * (theta * av).exp())
                    .collect();
                let h: Vec<f64> = a.iter().map(|av| (-theta * av).exp()).collect();
                integrate_separable(&g, &h, weights, Region::LowerTriangle)
            })
            .collect();
        let mut correction = 0.0;
        for c in corrections {
            correction += c?;
        }
        Ok((self.strat - correction) / self.psi)
    }
}

/// Evaluate F_N(θ) once. Part of the fixed-point estimator, exposed for
/// contraction experiments; batch callers should build a
/// [`FixedPointSolver`] and reuse it.
pub fn fixed_point_map(
    ensemble: &ParticleEnsemble,
    model: &DriftModel,
    theta: f64,
    surrogate: &ExponentialSurrogate,
) -> Result<f64> {
    FixedPointSolver::with_surrogate(ensemble, model, surrogate)?.map(theta)
}

#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting value; defaults to the analytic least-squares contrast
    /// minimizer, which is cheap and already near-consistent.
    pub theta_init: Option<f64>,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-8,
            max_iter: 50,
            theta_init: None,
        }
    }
}

/// Number of consecutive residual increases treated as divergence.
const DIVERGENCE_PATIENCE: usize = 5;

fn resolve_theta_init(
    ensemble: &ParticleEnsemble,
    model: &DriftModel,
    requested: Option<f64>,
) -> f64 {
    requested.unwrap_or_else(|| {
        ContrastQuadratic::new(ensemble, model)
            .ls_minimizer()
            .map(|v| v[0])
            .unwrap_or(0.0)
    })
}

/// Iterate θ ← F_N(θ) to a fixed point. The iteration count reports how many
/// applications moved the iterate; a convergent run that starts at the fixed
/// point reports 0.
pub fn fixed_point_estimator(
    ensemble: &ParticleEnsemble,
    model: &DriftModel,
    config: &FixedPointConfig,
) -> Result<EstimationResult> {
    let solver = FixedPointSolver::new(ensemble, model)?;
    let theta_init = resolve_theta_init(ensemble, model, config.theta_init);
    let contraction = check_contraction(
        model,
        ensemble.noise().hurst(),
        ensemble.sigma(),
        ensemble.grid().horizon(),
    );

    let mut theta = theta_init;
    let mut residuals = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut residual = f64::NAN;
    let mut prev_residual = f64::INFINITY;
    let mut growth_streak = 0;
    for _ in 0..config.max_iter {
        let next = solver.map(theta)?;
        residual = (next - theta).abs();
        residuals.push(residual);
        if !residual.is_finite() {
            return Err(Error::FixedPointDiverged {
                iterations,
                trajectory: residuals,
            });
        }
        if residual < config.tol {
            theta = next;
            converged = true;
            break;
        }
        if residual > prev_residual {
            growth_streak += 1;
            if growth_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::FixedPointDiverged {
                    iterations,
                    trajectory: residuals,
                });
            }
        } else {
            growth_streak = 0;
        }
        prev_residual = residual;
        theta = next;
        iterations += 1;
    }

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("psi".into(), solver.psi());
    diagnostics.insert("residual".into(), residual);
    diagnostics.insert("theta_init".into(), theta_init);
    diagnostics.insert("t_max".into(), contraction.t_max);
    diagnostics.insert(
        "contraction_ok".into(),
        match contraction.ok {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => f64::NAN,
        },
    );
    Ok(EstimationResult {
        estimator: "fixed_point".into(),
        theta_hat: vec![theta],
        iterations: Some(iterations),
        converged,
        contraction_c_t: Some(contraction.c_t),
        diagnostics,
    })
}

/// ⌊ln N⌋ with a floor of one application.
pub fn default_iteration_count(n_particles: usize) -> usize {
    ((n_particles as f64).ln().floor() as usize).max(1)
}

/// Apply F_N exactly `n_iters` times from `theta_init` (per-iteration values
/// recorded in the diagnostics).
pub fn iterative_estimator(
    ensemble: &ParticleEnsemble,
    model: &DriftModel,
    n_iters: usize,
    theta_init: Option<f64>,
) -> Result<EstimationResult> {
    if n_iters == 0 {
        return Err(Error::InvalidInput(
            "iterative estimator needs at least one application of the map".into(),
        ));
    }
    let solver = FixedPointSolver::new(ensemble, model)?;
    let init = resolve_theta_init(ensemble, model, theta_init);
    let contraction = check_contraction(
        model,
        ensemble.noise().hurst(),
        ensemble.sigma(),
        ensemble.grid().horizon(),
    );

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("theta_init".into(), init);
    let mut theta = init;
    let mut last_step = f64::NAN;
    for k in 1..=n_iters {
        let next = solver.map(theta)?;
        last_step = (next - theta).abs();
        diagnostics.insert(format!("theta_iter_{k}"), next);
        theta = next;
    }
    diagnostics.insert("residual".into(), last_step);
    Ok(EstimationResult {
        estimator: "iterative".into(),
        theta_hat: vec![theta],
        iterations: Some(n_iters),
        converged: last_step < 1e-8,
        contraction_c_t: Some(contraction.c_t),
        diagnostics,
    })
}

/// Cartesian search grid for the contrast estimator. Axis m runs from lo_m
/// to hi_m in steps of mesh_m; points are evaluated as
/// lo + (hi − lo)·k/K so that grids with representable endpoints hit interior
/// rationals exactly (e.g. lo=10, hi=14, mesh=0.05 contains 12 exactly).
#[derive(Debug, Clone)]
pub struct ContrastGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    mesh: Vec<f64>,
    /// Intervals per axis (points per axis minus one).
    segments: Vec<usize>,
}

impl ContrastGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, mesh: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != mesh.len() {
            return Err(Error::InvalidInput(format!(
                "grid axes mismatch: {} lower bounds, {} upper bounds, {} meshes",
                lo.len(),
                hi.len(),
                mesh.len()
            )));
        }
        let mut segments = Vec::with_capacity(lo.len());
        for m in 0..lo.len() {
            if !(lo[m] < hi[m]) {
                return Err(Error::InvalidInput(format!(
                    "grid axis {m} needs lo < hi, got [{}, {}]",
                    lo[m], hi[m]
                )));
            }
            if !(mesh[m] > 0.0) || !mesh[m].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "grid axis {m} needs a positive mesh, got {}",
                    mesh[m]
                )));
            }
            let k = ((hi[m] - lo[m]) / mesh[m]).round().max(1.0);
            segments.push(k as usize);
        }
        Ok(ContrastGrid {
            lo,
            hi,
            mesh,
            segments,
        })
    }

    /// Grid with a single point per axis.
    pub fn singleton(theta: &[f64]) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidInput("empty grid".into()));
        }
        Ok(ContrastGrid {
            lo: theta.to_vec(),
            hi: theta.to_vec(),
            mesh: vec![1.0; theta.len()],
            segments: vec![0; theta.len()],
        })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn axis_points(&self, m: usize) -> usize {
        self.segments[m] + 1
    }

    pub fn mesh(&self, m: usize) -> f64 {
        self.mesh[m]
    }

    pub fn value(&self, m: usize, k: usize) -> f64 {
        if self.segments[m] == 0 {
            self.lo[m]
        } else {
            self.lo[m] + (self.hi[m] - self.lo[m]) * (k as f64 / self.segments[m] as f64)
        }
    }

    pub fn total_points(&self) -> usize {
        self.segments.iter().map(|k| k + 1).product()
    }
}

/// Discrete contrast statistic, evaluated directly from its definition:
/// Q = Σ_i Σ_j [(ΔX − Δ·⟨θ, b⟩)² − Δ^{2H}].
pub fn contrast_value(observations: &ParticleEnsemble, model: &DriftModel, theta: &[f64]) -> f64 {
    let grid = observations.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let correction = dt.powf(observations.noise().hurst().two_h());
    let mut q = 0.0;
    for i in 0..observations.n_particles() {
        let path = observations.path(i);
        for j in 0..n {
            let drift = model.drift(theta, path[j], observations.summary(j));
            let resid = path[j + 1] - path[j] - dt * drift;
            q += resid * resid - correction;
        }
    }
    q
}

/// The contrast is quadratic in θ because the drift is linear in θ:
/// Q(θ) = q0 − 2·⟨lin, θ⟩ + θᵀ·quad·θ. Precomputing the three pieces makes
/// grid sweeps O(p²) per point and yields the analytic minimizer for free.
pub struct ContrastQuadratic {
    q0: f64,
    lin: DVector<f64>,
    quad: DMatrix<f64>,
}

impl ContrastQuadratic {
    pub fn new(observations: &ParticleEnsemble, model: &DriftModel) -> Self {
        let p = model.p();
        let grid = observations.grid();
        let n = grid.n_steps();
        let dt = grid.dt();
        let correction = dt.powf(observations.noise().hurst().two_h());
        let mut q0 = 0.0;
        let mut lin = DVector::zeros(p);
        let mut quad = DMatrix::zeros(p, p);
        let mut b_node = vec![0.0; p];
        for i in 0..observations.n_particles() {
            let path = observations.path(i);
            for j in 0..n {
                let dx = path[j + 1] - path[j];
                q0 += dx * dx - correction;
                let summary = observations.summary(j);
                for (m, slot) in b_node.iter_mut().enumerate() {
                    *slot = model.eval_b(m, path[j], summary);
                }
                for l in 0..p {
                    lin[l] += dt * b_node[l] * dx;
                    for m in 0..p {
                        quad[(l, m)] += dt * dt * b_node[l] * b_node[m];
                    }
                }
            }
        }
        ContrastQuadratic { q0, lin, quad }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        self.q0 - 2.0 * self.lin.dot(&t) + (&self.quad * &t).dot(&t)
    }

    /// Unconstrained minimizer quad⁻¹·lin, when the normal matrix is
    /// invertible.
    pub fn ls_minimizer(&self) -> Option<Vec<f64>> {
        self.quad
            .clone()
            .lu()
            .solve(&self.lin)
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .map(|v| v.iter().copied().collect())
    }
}

/// Exhaustive grid argmin of the contrast. Ties resolve to the
/// lexicographically smallest θ (the sweep visits points in lexicographic
/// order and only strict improvements move the argmin).
pub fn contrast_estimator(
    observations: &ParticleEnsemble,
    model: &DriftModel,
    grid: &ContrastGrid,
) -> Result<EstimationResult> {
    if grid.dims() != model.p() {
        return Err(Error::InvalidInput(format!(
            "grid has {} axes but model `{}` has p = {}",
            grid.dims(),
            model.name(),
            model.p()
        )));
    }
    let quadratic = ContrastQuadratic::new(observations, model);
    let p = grid.dims();
    let mut indices = vec![0usize; p];
    let mut theta = vec![0.0; p];
    let mut best = f64::INFINITY;
    let mut best_theta = vec![f64::NAN; p];
    'sweep: loop {
        for m in 0..p {
            theta[m] = grid.value(m, indices[m]);
        }
        let q = quadratic.value(&theta);
        if q < best {
            best = q;
            best_theta.copy_from_slice(&theta);
        }
        // Odometer increment, last axis fastest: lexicographic visit order.
        for m in (0..p).rev() {
            indices[m] += 1;
            if indices[m] < grid.axis_points(m) {
                continue 'sweep;
            }
            indices[m] = 0;
        }
        break;
    }

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("q_min".into(), best);
    if let Some(ls) = quadratic.ls_minimizer() {
        for (m, v) in ls.iter().enumerate() {
            diagnostics.insert(format!("ls_minimizer_{m}"), *v);
        }
    }
    Ok(EstimationResult {
        estimator: "contrast".into(),
        theta_hat: best_theta,
        iterations: None,
        converged: true,
        contraction_c_t: None,
        diagnostics,
    })
}

/// Monte Carlo estimates of the limiting variances.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub psi: f64,
    pub sigma2: f64,
    pub sigma_tilde2: f64,
    pub v_tilde: f64,
    pub sigma_bar2: f64,
    pub stderr_psi: f64,
    pub stderr_sigma2: f64,
    pub stderr_sigma_tilde2: f64,
    pub stderr_v_tilde: f64,
    pub stderr_sigma_bar2: f64,
    pub n_mc: usize,
}

/// Size of the auxiliary reference system standing in for the limit law.
const VARIANCE_REFERENCE_SIZE: usize = 600;

/// One-dimensional kernel cell masses: r[m] = ∫ over a cell at lag m of
/// φ(t, ·), i.e. H·Δ^{2H−1}·((m+1)^{2H−1} − m^{2H−1}). A cell [v_l, v_{l+1}]
/// against node t_k has lag l−k for l ≥ k and k−l−1 otherwise.
fn line_masses(h: HurstParameter, grid: &TimeGrid) -> Vec<f64> {
    let two_h = h.two_h();
    let hv = 0.5 * two_h;
    let scale = hv * grid.dt().powf(two_h - 1.0);
    let n = grid.n_steps();
    (0..n)
        .map(|m| {
            let m = m as f64;
            scale * ((m + 1.0).powf(two_h - 1.0) - m.powf(two_h - 1.0))
        })
        .collect()
}

fn line_lag(cell: usize, node: usize) -> usize {
    if cell >= node {
        cell - node
    } else {
        node - cell - 1
    }
}

/// Per-sample primitives entering the variance formulas.
struct VarianceSample {
    psi: f64,
    sigma2: f64,
    v_tilde: f64,
}

fn variance_sample(
    tracked_path: &[f64],
    reference: &ParticleEnsemble,
    model: &DriftModel,
    theta0: f64,
    sigma: f64,
    weights: &KernelWeights,
    masses: &[f64],
    node_weights: &[f64],
) -> Result<VarianceSample> {
    let grid = reference.grid();
    let n = grid.n_steps();
    let w = n + 1;
    let dt = grid.dt();

    let mut b = vec![0.0; w];
    let mut c = vec![0.0; w];
    let mut a = vec![0.0; w];
    for j in 0..w {
        let x = tracked_path[j];
        let summary = reference.summary(j);
        b[j] = model.eval_b(0, x, summary);
        c[j] = model.eval_dxb(0, x, summary);
        if j < n {
            a[j + 1] = a[j] + dt * c[j];
        }
    }

    let psi: f64 = node_weights.iter().zip(b.iter()).map(|(w, b)| w * b * b).sum();
    let double = integrate_separable(&b, &b, weights, Region::Full)?;

    // Quadruple term: K(s,t) = ∂_x b(X̄_s)·σ·e^{θ⁰A(s)}·∫_0^s e^{−θ⁰A(v)}
    // φ(t,v) dv, accumulated over v-cells by a prefix sweep in s, then
    // ∬ K(s,t)·K(t,s) with trapezoid node weights.
    let e_neg: Vec<f64> = a.iter().map(|av| (-theta0 * av).exp()).collect();
    let cell_avg: Vec<f64> = (0..n).map(|l| 0.5 * (e_neg[l] + e_neg[l + 1])).collect();
    let mut inner = vec![0.0; w * w]; // inner[j*w + k] = ∫_0^{s_j} e^{−θA}φ(t_k,·)
    for j in 1..w {
        let l = j - 1;
        for k in 0..w {
            inner[j * w + k] = inner[(j - 1) * w + k] + cell_avg[l] * masses[line_lag(l, k)];
        }
    }
    let kfun = |s: usize, t: usize| c[s] * sigma * (theta0 * a[s]).exp() * inner[s * w + t];
    let mut quad = 0.0;
    for j in 0..w {
        let mut row = 0.0;
        for k in 0..w {
            row += node_weights[k] * kfun(j, k) * kfun(k, j);
        }
        quad += node_weights[j] * row;
    }
    let sigma2 = sigma * sigma * (double + quad);

    // Ṽ = ∬_{s<t} ∂_x b(X̄_t)·(A(t) − A(s))·e^{θ⁰(A(t)−A(s))}·φ(t,s),
    // split into two separable lower-triangle integrals.
    let e_pos: Vec<f64> = a.iter().map(|av| (theta0 * av).exp()).collect();
    let g1: Vec<f64> = (0..w).map(|t| c[t] * a[t] * e_pos[t]).collect();
    let g2: Vec<f64> = (0..w).map(|t| c[t] * e_pos[t]).collect();
    let h2: Vec<f64> = (0..w).map(|s| a[s] * e_neg[s]).collect();
    let v_tilde = integrate_separable(&g1, &e_neg, weights, Region::LowerTriangle)?
        - integrate_separable(&g2, &h2, weights, Region::LowerTriangle)?;

    Ok(VarianceSample {
        psi,
        sigma2,
        v_tilde,
    })
}

/// Monte Carlo evaluation of Ψ, Σ², Σ̃² = Σ²/Ψ², Ṽ, and Σ̄² = Σ²/(Ψ−Ṽ)²
/// under the limit proxy, with delta-method standard errors. Scalar
/// parameters and H > 1/2 only.
pub fn asymptotic_variance_mc(
    model: &DriftModel,
    theta0: &[f64],
    sigma: f64,
    h: HurstParameter,
    grid: &TimeGrid,
    n_mc: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if model.p() != 1 {
        return Err(Error::ScalarParameterOnly {
            estimator: "variance",
            p: model.p(),
        });
    }
    if h.value() <= 0.5 {
        return Err(Error::KernelNeedsRoughness(h.value()));
    }
    if n_mc < 2 {
        return Err(Error::InvalidInput(format!(
            "variance estimation needs at least 2 samples, got {n_mc}"
        )));
    }
    let th = theta0[0];

    let noise = Arc::new(sample_fbm(h, grid, n_mc, seed, &[rng::purpose::NOISE])?);
    let initials = InitialCondition::StdNormal.sample(n_mc, seed, &[rng::purpose::INITIAL])?;
    let proxy = simulate_limit_proxy(
        model,
        theta0,
        sigma,
        grid,
        &initials,
        &noise,
        VARIANCE_REFERENCE_SIZE,
        &InitialCondition::StdNormal,
        seed,
        &[],
    )?;

    let weights = KernelWeights::build(h, grid)?;
    let masses = line_masses(h, grid);
    let node_weights = trapezoid_weights(grid);
    let samples: Vec<Result<VarianceSample>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            variance_sample(
                proxy.tracked.path(i),
                &proxy.reference,
                model,
                th,
                sigma,
                &weights,
                &masses,
                &node_weights,
            )
        })
        .collect();
    let mut psi_s = Vec::with_capacity(n_mc);
    let mut sig_s = Vec::with_capacity(n_mc);
    let mut vt_s = Vec::with_capacity(n_mc);
    for s in samples {
        let s = s?;
        psi_s.push(s.psi);
        sig_s.push(s.sigma2);
        vt_s.push(s.v_tilde);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let psi = mean(&psi_s);
    let sigma2 = mean(&sig_s);
    let v_tilde = mean(&vt_s);
    if !(psi > 0.0) {
        return Err(Error::PsiNotPositive { value: psi });
    }

    // Sample covariance of (psi, sigma2, v_tilde) for the delta method.
    let nf = n_mc as f64;
    let cov = |x: &[f64], mx: f64, y: &[f64], my: f64| {
        x.iter()
            .zip(y.iter())
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / (nf - 1.0)
    };
    let c_pp = cov(&psi_s, psi, &psi_s, psi);
    let c_ss = cov(&sig_s, sigma2, &sig_s, sigma2);
    let c_vv = cov(&vt_s, v_tilde, &vt_s, v_tilde);
    let c_ps = cov(&psi_s, psi, &sig_s, sigma2);
    let c_pv = cov(&psi_s, psi, &vt_s, v_tilde);
    let c_sv = cov(&sig_s, sigma2, &vt_s, v_tilde);
    let propagate = |gp: f64, gs: f64, gv: f64| {
        ((gp * gp * c_pp
            + gs * gs * c_ss
            + gv * gv * c_vv
            + 2.0 * gp * gs * c_ps
            + 2.0 * gp * gv * c_pv
            + 2.0 * gs * gv * c_sv)
            / nf)
            .sqrt()
    };

    let sigma_tilde2 = sigma2 / (psi * psi);
    let denom = psi - v_tilde;
    let sigma_bar2 = sigma2 / (denom * denom);

    Ok(VarianceReport {
        psi,
        sigma2,
        sigma_tilde2,
        v_tilde,
        sigma_bar2,
        stderr_psi: (c_pp / nf).sqrt(),
        stderr_sigma2: (c_ss / nf).sqrt(),
        stderr_sigma_tilde2: propagate(-2.0 * sigma2 / psi.powi(3), 1.0 / (psi * psi), 0.0),
        stderr_v_tilde: (c_vv / nf).sqrt(),
        stderr_sigma_bar2: propagate(
            -2.0 * sigma2 / denom.powi(3),
            1.0 / (denom * denom),
            2.0 * sigma2 / denom.powi(3),
        ),
        n_mc,
    })
}
