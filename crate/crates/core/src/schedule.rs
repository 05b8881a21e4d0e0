//! Noise schedules: discrete β tables and the continuous variance-preserving
//! SDE.
//!
//! Discrete step indices run `1..=T`; index `0` denotes clean data and is
//! given `ᾱ_0 = 1`, which is the convention the ground-truth trajectory and
//! the time-0 noise query rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in diffusion time, either a discrete step index or a continuous
/// time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Time {
    Step(usize),
    Continuous(f64),
}

impl From<usize> for Time {
    fn from(t: usize) -> Self {
        Time::Step(t)
    }
}

impl From<f64> for Time {
    fn from(t: f64) -> Self {
        Time::Continuous(t)
    }
}

impl std::fmt::Display for Time {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Time::Step(t) => write!(f, "{t}"),
            Time::Continuous(t) => write!(f, "{t}"),
        }
    }
}

/// Discrete `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π_{k≤t} α_k` tables.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiscreteSchedule {
    /// `steps` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("every beta must lie in (0, 1), got {b}")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Whether `ᾱ_1 ≥ 0.999`, so that the clean sample is a good stand-in
    /// for the first noised point.
    pub fn first_step_is_proximal(&self) -> bool {
        self.alpha_bars[0] >= 0.999
    }
}

/// Variance-preserving SDE with linear `β(t) = β_min + t (β_max − β_min)`.
///
/// Drift `f_t(x) = −½ β(t) x`, diffusion `g_t = √β(t)`, and
/// `ᾱ(t) = exp(−∫₀ᵗ β(s) ds)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpSde {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSde {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl VpSde {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max, got {beta_min} and {beta_max}"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    fn check(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("continuous time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min))
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        Ok((-self.integrated_beta(t)?).exp())
    }

    /// Squared diffusion coefficient `g_t² = β(t)`.
    pub fn g_squared(&self, t: f64) -> Result<f64> {
        self.beta(t)
    }

    /// Drift coefficient `−½ β(t)` multiplying `x`.
    pub fn drift_coefficient(&self, t: f64) -> Result<f64> {
        Ok(-0.5 * self.beta(t)?)
    }
}

/// Either kind of schedule, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Linear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    VpSde {
        beta_min: f64,
        beta_max: f64,
    },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
            } => Ok(NoiseSchedule::Discrete(DiscreteSchedule::linear(
                steps, beta_start, beta_end,
            )?)),
            ScheduleSpec::VpSde { beta_min, beta_max } => {
                Ok(NoiseSchedule::Continuous(VpSde::new(beta_min, beta_max)?))
            }
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ScheduleSpec::VpSde { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSchedule {
    Discrete(DiscreteSchedule),
    Continuous(VpSde),
}

impl NoiseSchedule {
    pub fn is_continuous(&self) -> bool {
        matches!(self, NoiseSchedule::Continuous(_))
    }

    pub fn alpha_bar(&self, t: Time) -> Result<f64> {
        match (self, t) {
            (NoiseSchedule::Discrete(s), Time::Step(t)) => s.alpha_bar(t),
            (NoiseSchedule::Continuous(s), Time::Continuous(t)) => s.alpha_bar(t),
            _ => Err(Self::mismatch(t)),
        }
    }

    /// Model time in `[0, 1)` for discrete steps and `[0, 1]` otherwise.
    ///
    /// Step `t ≥ 1` maps to `(t − 1)/T`, so the first noising step is the
    /// model's time 0 and the proximal query `ε_θ(x0, 0)` lands on a trained
    /// input. Step 0 shares that time.
    pub fn model_time(&self, t: Time) -> Result<f64> {
        match (self, t) {
            (NoiseSchedule::Discrete(s), Time::Step(step)) => {
                if step > s.steps() {
                    return Err(Error::invalid(format!("step {step} outside 0..={}", s.steps())));
                }
                Ok(step.saturating_sub(1) as f64 / s.steps() as f64)
            }
            (NoiseSchedule::Continuous(_), Time::Continuous(t)) => {
                VpSde::check(t)?;
                Ok(t)
            }
            _ => Err(Self::mismatch(t)),
        }
    }

    /// The clean-data time: step 0 or continuous 0.
    pub fn origin(&self) -> Time {
        match self {
            NoiseSchedule::Discrete(_) => Time::Step(0),
            NoiseSchedule::Continuous(_) => Time::Continuous(0.0),
        }
    }

    fn mismatch(t: Time) -> Error {
        Error::invalid(format!("time {t:?} does not match the schedule kind"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_schedules() {
        let s = DiscreteSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        let s = DiscreteSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn long_schedule_matches_running_product() {
        let s = DiscreteSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Independent route: accumulate in log space.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expected = log_sum.exp();
        let got = s.alpha_bar(1000).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn schedule_sanity() {
        let s = DiscreteSchedule::linear(100, 1e-4, 0.2).unwrap();
        for t in 1..=100 {
            assert_eq!(s.alpha(t).unwrap() + s.beta(t).unwrap(), 1.0);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.first_step_is_proximal());
    }

    #[test]
    fn bounds_are_checked() {
        assert!(DiscreteSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiscreteSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiscreteSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiscreteSchedule::linear(10, 0.1, 1.0).is_err());
        let s = DiscreteSchedule::linear(10, 0.1, 0.2).unwrap();
        assert!(s.alpha_bar(11).is_err());
    }

    #[test]
    fn vp_sde_closed_form() {
        let sde = VpSde::default();
        assert_eq!(sde.alpha_bar(0.0).unwrap(), 1.0);
        let expected = (-(0.1 * 0.3 + 0.5 * 0.09 * 19.9_f64)).exp();
        assert!((sde.alpha_bar(0.3).unwrap() - expected).abs() < 1e-15);
        assert!(sde.alpha_bar(1.5).is_err());
    }

    #[test]
    fn mismatched_time_kind_is_rejected() {
        let s = NoiseSchedule::Continuous(VpSde::default());
        assert!(s.alpha_bar(Time::Step(3)).is_err());
        assert_eq!(s.model_time(Time::Continuous(0.25)).unwrap(), 0.25);
    }

    #[test]
    fn first_step_is_model_time_zero() {
        let s = NoiseSchedule::Discrete(DiscreteSchedule::linear(100, 1e-4, 0.01).unwrap());
        assert_eq!(s.model_time(Time::Step(0)).unwrap(), 0.0);
        assert_eq!(s.model_time(Time::Step(1)).unwrap(), 0.0);
        assert_eq!(s.model_time(Time::Step(21)).unwrap(), 0.2);
        assert!(s.model_time(Time::Step(101)).is_err());
    }
}
