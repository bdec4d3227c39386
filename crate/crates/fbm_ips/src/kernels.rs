//! The singular kernel φ(t,s) = H(2H-1)|t-s|^{2H-2} and exact-cell quadrature.
//!
//! For H > 1/2 the double antiderivative of φ is the fBm covariance R, so the
//! integral of φ over a grid cell is a second difference of R at the cell
//! corners — no evaluation of φ near the diagonal is ever needed. On a
//! uniform grid those second differences collapse to the fGn autocovariance
//! at the lag |j - k|, which is what `KernelWeights` stores: one vector of
//! lags instead of an n x n matrix.
//!
//! Quadrature places the integrand by corner averaging: the integral of
//! f(t,s)·φ(t,s) is approximated by Σ_cells mass(cell) · mean(f at the four
//! corner nodes). Cell masses are exact, so the only error is in f.

use crate::error::{Error, Result};
use crate::fbm::{fgn_covariance, HurstParameter, TimeGrid};

/// Pointwise kernel value. Diverges on the diagonal; quadrature must go
/// through cell masses instead.
pub fn phi(h: HurstParameter, t: f64, s: f64) -> Result<f64> {
    let hv = h.value();
    if hv <= 0.5 {
        return Err(Error::KernelNeedsRoughness(hv));
    }
    if t == s {
        return Err(Error::InvalidInput(format!(
            "phi is non-integrable at t = s (got t = s = {t}); use cell masses"
        )));
    }
    Ok(hv * (2.0 * hv - 1.0) * (t - s).abs().powf(2.0 * hv - 2.0))
}

/// Integration region for [`double_integral`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// The whole square [0,T]^2.
    Full,
    /// The open triangle {s < t}; diagonal cells contribute half their mass.
    LowerTriangle,
}

/// Exact cell masses of φ on a uniform grid.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    hurst: HurstParameter,
    grid: TimeGrid,
    /// gamma[d] = ∫∫ φ over any cell pair at lag d = |j - k|. This equals the
    /// fGn autocovariance at that lag, and gamma[0] = Δ^{2H}.
    gamma: Vec<f64>,
}

impl KernelWeights {
    pub fn build(h: HurstParameter, grid: &TimeGrid) -> Result<Self> {
        if h.value() <= 0.5 {
            return Err(Error::KernelNeedsRoughness(h.value()));
        }
        let n = grid.n_steps();
        let dt = grid.dt();
        let gamma = (0..n).map(|d| fgn_covariance(h, dt, d)).collect();
        Ok(KernelWeights {
            hurst: h,
            grid: grid.clone(),
            gamma,
        })
    }

    pub fn hurst(&self) -> HurstParameter {
        self.hurst
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// ∫ φ over [t_j, t_{j+1}] x [t_k, t_{k+1}].
    pub fn cell_mass(&self, j: usize, k: usize) -> f64 {
        self.gamma[j.abs_diff(k)]
    }

    /// Same restricted to {s < t}, with j indexing the t-cell and k the
    /// s-cell. The diagonal square splits evenly: the one-sided
    /// antiderivative (u-v)^{2H}/2 gives each triangle half of Δ^{2H}.
    pub fn triangular_mass(&self, j: usize, k: usize) -> f64 {
        match k.cmp(&j) {
            std::cmp::Ordering::Less => self.gamma[j - k],
            std::cmp::Ordering::Equal => 0.5 * self.gamma[0],
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    /// Σ over all cells, compensated so the T^{2H} identity survives n = 1000.
    pub fn total_mass(&self) -> f64 {
        let n = self.grid.n_steps();
        let mut sum = KahanSum::default();
        sum.add(n as f64 * self.gamma[0]);
        for (d, &g) in self.gamma.iter().enumerate().skip(1) {
            sum.add(2.0 * (n - d) as f64 * g);
        }
        sum.value()
    }
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// ∫∫ f(t,s) φ(t,s) dt ds over the region, with f given at node-index pairs
/// (first argument is the t-node, second the s-node).
pub fn double_integral<F: Fn(usize, usize) -> f64>(
    f: F,
    weights: &KernelWeights,
    region: Region,
) -> f64 {
    let n = weights.grid.n_steps();
    let mut acc = 0.0;
    for j in 0..n {
        let k_end = match region {
            Region::Full => n,
            Region::LowerTriangle => j + 1,
        };
        for k in 0..k_end {
            let mass = match region {
                Region::Full => weights.cell_mass(j, k),
                Region::LowerTriangle => weights.triangular_mass(j, k),
            };
            let corner_avg =
                0.25 * (f(j, k) + f(j + 1, k) + f(j, k + 1) + f(j + 1, k + 1));
            acc += mass * corner_avg;
        }
    }
    acc
}

/// Specialized [`double_integral`] for separable integrands f(t,s) =
/// g(t)·h(s). The corner average factorizes into per-axis node averages, so
/// the whole sum becomes a bilinear form in the lag weights. `g` and `h` are
/// node arrays of length n_nodes. Used in the estimator hot loops.
pub fn integrate_separable(
    g: &[f64],
    h: &[f64],
    weights: &KernelWeights,
    region: Region,
) -> Result<f64> {
    let n = weights.grid.n_steps();
    if g.len() != n + 1 || h.len() != n + 1 {
        return Err(Error::InvalidInput(format!(
            "integrand arrays must have {} nodes (got {} and {})",
            n + 1,
            g.len(),
            h.len()
        )));
    }
    // Midpoint-of-endpoints averages per cell.
    let gm: Vec<f64> = (0..n).map(|j| 0.5 * (g[j] + g[j + 1])).collect();
    let hm: Vec<f64> = (0..n).map(|k| 0.5 * (h[k] + h[k + 1])).collect();
    let gamma = &weights.gamma;
    let mut acc = 0.0;
    match region {
        Region::Full => {
            for j in 0..n {
                let mut inner = 0.0;
                for (k, &h_k) in hm.iter().enumerate() {
                    inner += gamma[j.abs_diff(k)] * h_k;
                }
                acc += gm[j] * inner;
            }
        }
        Region::LowerTriangle => {
            for j in 0..n {
                let mut inner = 0.5 * gamma[0] * hm[j];
                for (k, &h_k) in hm.iter().enumerate().take(j) {
                    inner += gamma[j - k] * h_k;
                }
                acc += gm[j] * inner;
            }
        }
    }
    Ok(acc)
}
