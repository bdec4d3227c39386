//! Drift models b(x, μ) = (b_1, ..., b_p) with their x- and measure
//! derivatives.
//!
//! Interaction with the empirical measure goes through [`MeasureSummary`]
//! (sorted sample plus first two moments), so mean-field models evaluate in
//! O(1) per call while the sorted sample stays available for Wasserstein
//! diagnostics. The measure derivative `eval_dmub(m, x, measure, v)` is the
//! Lions derivative evaluated at the sample point v: perturbing one of N
//! sample points by δ moves b_m by (δ/N)·∂_μ b_m(x, μ)(v) to first order.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Summary of an empirical measure: the sorted sample and its first two
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSummary {
    sample: Vec<f64>,
    mean: f64,
    second_moment: f64,
}

impl MeasureSummary {
    pub fn from_sample(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample {
                context: "MeasureSummary::from_sample",
            });
        }
        let mut sample = values.to_vec();
        sample.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let second_moment = sample.iter().map(|v| v * v).sum::<f64>() / n;
        Ok(MeasureSummary {
            sample,
            mean,
            second_moment,
        })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    /// Sorted positions.
    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }
}

/// Optional analytic bounds a model can declare. Estimator preflight checks
/// use what is present and degrade to warnings when a bound is missing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMetadata {
    /// Lipschitz constant of x ↦ b(x, μ).
    pub lipschitz_l: Option<f64>,
    /// Lower bound M with |∂_x b_m| ≥ M everywhere.
    pub deriv_lower_m: Option<f64>,
    /// Lower bound l with |b(x, μ)| ≥ l everywhere.
    pub drift_lower_l: Option<f64>,
    /// Supremum of |∂_x b| over states and measures.
    pub dx_b_sup: Option<f64>,
    /// Whether ∂_x b ≤ 0 everywhere (the dissipative case).
    pub dx_b_nonpositive: bool,
}

type StateFn = Arc<dyn Fn(usize, f64, &MeasureSummary) -> f64 + Send + Sync>;
type MeasureDerivFn = Arc<dyn Fn(usize, f64, &MeasureSummary, f64) -> f64 + Send + Sync>;

/// Immutable drift description; cheap to clone and safe to share across
/// threads. Evaluation callbacks must be pure.
#[derive(Clone)]
pub struct DriftModel {
    name: String,
    p: usize,
    b: StateFn,
    dx_b: StateFn,
    dmu_b: MeasureDerivFn,
    metadata: ModelMetadata,
    /// True when ∂_μ b(x, μ)(v) does not depend on v. All built-ins interact
    /// only through the mean, which makes the Malliavin sums collapse from
    /// O(N²) to O(N) per time step.
    dmu_constant_in_v: bool,
}

impl fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftModel")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("metadata", &self.metadata)
            .finish()
    }
}

impl DriftModel {
    /// Register a custom drift from user-supplied callbacks.
    pub fn custom(
        name: impl Into<String>,
        p: usize,
        b: StateFn,
        dx_b: StateFn,
        dmu_b: MeasureDerivFn,
        metadata: ModelMetadata,
        dmu_constant_in_v: bool,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config(
                "drift model needs at least one component (p >= 1)".into(),
            ));
        }
        Ok(DriftModel {
            name: name.into(),
            p,
            b,
            dx_b,
            dmu_b,
            metadata,
            dmu_constant_in_v,
        })
    }

    /// b(x, μ) = x − mean(μ), the mean-reverting/repelling linear model.
    pub fn linear_meanfield() -> Self {
        DriftModel {
            name: "linear".into(),
            p: 1,
            b: Arc::new(|_, x, mu: &MeasureSummary| x - mu.mean()),
            dx_b: Arc::new(|_, _, _| 1.0),
            dmu_b: Arc::new(|_, _, _, _| -1.0),
            metadata: ModelMetadata {
                lipschitz_l: Some(1.0),
                deriv_lower_m: Some(1.0),
                drift_lower_l: None,
                dx_b_sup: Some(1.0),
                dx_b_nonpositive: false,
            },
            dmu_constant_in_v: true,
        }
    }

    /// b(x, μ) = 2 − arctan(x − mean(μ)): bounded away from zero, with
    /// nonpositive state derivative.
    pub fn arctan() -> Self {
        DriftModel {
            name: "arctan".into(),
            p: 1,
            b: Arc::new(|_, x, mu: &MeasureSummary| 2.0 - (x - mu.mean()).atan()),
            dx_b: Arc::new(|_, x, mu: &MeasureSummary| {
                let d = x - mu.mean();
                -1.0 / (1.0 + d * d)
            }),
            dmu_b: Arc::new(|_, x, mu: &MeasureSummary, _| {
                let d = x - mu.mean();
                1.0 / (1.0 + d * d)
            }),
            metadata: ModelMetadata {
                lipschitz_l: Some(1.0),
                deriv_lower_m: None,
                drift_lower_l: Some(2.0 - std::f64::consts::FRAC_PI_2),
                dx_b_sup: Some(1.0),
                dx_b_nonpositive: true,
            },
            dmu_constant_in_v: true,
        }
    }

    /// Two components: b_1(x, μ) = x − mean(μ), b_2(x, μ) = x.
    pub fn two_param() -> Self {
        DriftModel {
            name: "two_param".into(),
            p: 2,
            b: Arc::new(|m, x, mu: &MeasureSummary| match m {
                0 => x - mu.mean(),
                _ => x,
            }),
            dx_b: Arc::new(|_, _, _| 1.0),
            dmu_b: Arc::new(|m, _, _, _| match m {
                0 => -1.0,
                _ => 0.0,
            }),
            metadata: ModelMetadata {
                lipschitz_l: Some(1.0),
                deriv_lower_m: Some(1.0),
                drift_lower_l: None,
                dx_b_sup: Some(1.0),
                dx_b_nonpositive: false,
            },
            dmu_constant_in_v: true,
        }
    }

    /// Model lookup for config files: `linear`, `arctan`, `two_param`.
    pub fn by_key(key: &str) -> Result<Self> {
        match key {
            "linear" => Ok(Self::linear_meanfield()),
            "arctan" => Ok(Self::arctan()),
            "two_param" => Ok(Self::two_param()),
            other => Err(Error::Config(format!(
                "unknown model `{other}`; expected one of linear, arctan, two_param"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn dmu_constant_in_v(&self) -> bool {
        self.dmu_constant_in_v
    }

    /// Component m of the drift.
    pub fn eval_b(&self, m: usize, x: f64, measure: &MeasureSummary) -> f64 {
        debug_assert!(m < self.p);
        (self.b)(m, x, measure)
    }

    /// ∂_x b_m.
    pub fn eval_dxb(&self, m: usize, x: f64, measure: &MeasureSummary) -> f64 {
        debug_assert!(m < self.p);
        (self.dx_b)(m, x, measure)
    }

    /// Lions derivative ∂_μ b_m(x, μ)(v).
    pub fn eval_dmub(&self, m: usize, x: f64, measure: &MeasureSummary, v: f64) -> f64 {
        debug_assert!(m < self.p);
        (self.dmu_b)(m, x, measure, v)
    }

    /// ⟨θ, b(x, μ)⟩.
    pub fn drift(&self, theta: &[f64], x: f64, measure: &MeasureSummary) -> f64 {
        debug_assert_eq!(theta.len(), self.p);
        let mut acc = 0.0;
        for (m, &th) in theta.iter().enumerate() {
            acc += th * self.eval_b(m, x, measure);
        }
        acc
    }

    /// ⟨θ, ∂_x b(x, μ)⟩.
    pub fn drift_dx(&self, theta: &[f64], x: f64, measure: &MeasureSummary) -> f64 {
        debug_assert_eq!(theta.len(), self.p);
        let mut acc = 0.0;
        for (m, &th) in theta.iter().enumerate() {
            acc += th * self.eval_dxb(m, x, measure);
        }
        acc
    }

    /// ⟨θ, ∂_μ b(x, μ)(v)⟩.
    pub fn drift_dmu(&self, theta: &[f64], x: f64, measure: &MeasureSummary, v: f64) -> f64 {
        debug_assert_eq!(theta.len(), self.p);
        let mut acc = 0.0;
        for (m, &th) in theta.iter().enumerate() {
            acc += th * self.eval_dmub(m, x, measure, v);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn summary_of(values: &[f64]) -> MeasureSummary {
        MeasureSummary::from_sample(values).unwrap()
    }

    #[test]
    fn summary_moments_consistent() {
        let s = summary_of(&[3.0, -1.0, 2.0]);
        assert_eq!(s.sample(), &[-1.0, 2.0, 3.0]);
        assert!((s.mean() - 4.0 / 3.0).abs() < 1e-15);
        assert!((s.second_moment() - 14.0 / 3.0).abs() < 1e-15);
        assert!(MeasureSummary::from_sample(&[]).is_err());
    }

    #[test]
    fn linear_model_values() {
        let m = DriftModel::linear_meanfield();
        let mu = summary_of(&[0.5, 0.5]);
        assert_eq!(m.eval_b(0, 2.0, &mu), 1.5);
        assert_eq!(m.eval_dxb(0, -7.0, &mu), 1.0);
        assert_eq!(m.eval_dmub(0, 3.0, &mu, -4.0), -1.0);
    }

    #[test]
    fn arctan_model_values() {
        let m = DriftModel::arctan();
        let mu = summary_of(&[1.0, 1.0, 1.0]);
        assert_eq!(m.eval_b(0, 1.0, &mu), 2.0);
        assert_eq!(m.eval_dxb(0, 1.0, &mu), -1.0);
        let l = m.metadata().drift_lower_l.unwrap();
        assert!((l - (2.0 - std::f64::consts::FRAC_PI_2)).abs() < 1e-15);
        // The infimum of |b| is approached as x - mean -> +inf.
        assert!(m.eval_b(0, 1e9, &mu) > l);
        assert!(m.eval_b(0, 1e9, &mu) - l < 1e-8);
        assert!(m.metadata().dx_b_nonpositive);
    }

    #[test]
    fn two_param_model_values() {
        let m = DriftModel::two_param();
        let mu = summary_of(&[1.0]);
        assert_eq!((m.eval_b(0, 1.0, &mu), m.eval_b(1, 1.0, &mu)), (0.0, 1.0));
        assert_eq!((m.eval_b(0, 3.0, &mu), m.eval_b(1, 3.0, &mu)), (2.0, 3.0));
        assert_eq!(m.eval_dmub(1, 3.0, &mu, 0.0), 0.0);
    }

    #[test]
    fn model_lookup() {
        assert_eq!(DriftModel::by_key("arctan").unwrap().name(), "arctan");
        assert_eq!(DriftModel::by_key("two_param").unwrap().p(), 2);
        assert!(DriftModel::by_key("cubic").is_err());
    }

    #[test]
    fn dx_b_matches_finite_difference() {
        let mut rng = crate::rng::stream_rng(2024, &[90]);
        let step = 1e-6;
        for model in [
            DriftModel::linear_meanfield(),
            DriftModel::arctan(),
            DriftModel::two_param(),
        ] {
            for _ in 0..100 {
                let x: f64 = rng.gen_range(-3.0..3.0);
                let sample: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mu = summary_of(&sample);
                for m in 0..model.p() {
                    let fd = (model.eval_b(m, x + step, &mu) - model.eval_b(m, x - step, &mu))
                        / (2.0 * step);
                    let exact = model.eval_dxb(m, x, &mu);
                    let scale = exact.abs().max(1.0);
                    assert!(
                        (fd - exact).abs() <= 1e-5 * scale,
                        "{} component {m}: fd {fd} vs {exact}",
                        model.name()
                    );
                }
            }
        }
    }

    #[test]
    fn dmu_b_matches_empirical_projection() {
        // Perturbing one of N sample points by delta must change b by
        // (delta/N) * dmu_b(v) to first order.
        let mut rng = crate::rng::stream_rng(2025, &[91]);
        let n = 50usize;
        let delta = 1e-5;
        for model in [
            DriftModel::linear_meanfield(),
            DriftModel::arctan(),
            DriftModel::two_param(),
        ] {
            for trial in 0..20 {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let sample: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let k = trial % n;
                let mut bumped = sample.clone();
                bumped[k] += delta;
                let mu = summary_of(&sample);
                let mu_bumped = summary_of(&bumped);
                for m in 0..model.p() {
                    let change = model.eval_b(m, x, &mu_bumped) - model.eval_b(m, x, &mu);
                    let predicted = delta / n as f64 * model.eval_dmub(m, x, &mu, sample[k]);
                    let scale = predicted.abs().max(delta / n as f64);
                    assert!(
                        (change - predicted).abs() <= 1e-3 * scale,
                        "{} component {m}: change {change:e} vs predicted {predicted:e}",
                        model.name()
                    );
                }
            }
        }
    }

    #[test]
    fn custom_model_registration() {
        let m = DriftModel::custom(
            "unit",
            1,
            Arc::new(|_, _, _| 1.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            ModelMetadata::default(),
            true,
        )
        .unwrap();
        let mu = summary_of(&[0.0]);
        assert_eq!(m.drift(&[3.0], 5.0, &mu), 3.0);
        assert!(DriftModel::custom(
            "broken",
            0,
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            ModelMetadata::default(),
            false,
        )
        .is_err());
    }
}
