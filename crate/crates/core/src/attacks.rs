//! Membership-inference scores against a noise predictor.
//!
//! Every score follows one orientation: lower means more member-like.
//!
//! | method  | statistic                                              | queries |
//! |---------|--------------------------------------------------------|---------|
//! | NA      | `‖ε − ε_θ(x_t, t)‖_p` with fresh Gaussian `ε`          | 1       |
//! | PIA     | `‖ε̄₀ − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) ε̄₀, t)‖_p`, `ε̄₀ = ε_θ(x0, 0)` | 2 |
//! | PIAN    | PIA with `ε̄₀` rescaled to `‖ε̄₀‖₁ = N √(π/2)`            | 2       |
//! | SecMI   | t-error of a denoise/renoise probe after deterministic noising | 2k + 2 |
//! | PIA-SDE | `‖f_t(x_t) − ½ g_t² s_θ(x_t, t)‖_p` on the proximal trajectory | 2 |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, ddim_update, groundtruth_point, mix, proximal_eps};
use crate::error::{Error, Result};
use crate::model::{Counted, NoisePredictor};
use crate::parallel::{self, Execution};
use crate::rng::{self, Stream};
use crate::schedule::{NoiseSchedule, Time, VpSde};
use crate::tensor::{lp_norm, Tensor};

pub use crate::diffusion::reconstruct_x0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "NA")]
    NaiveAttack,
    #[serde(rename = "SecMI")]
    SecMi,
    #[serde(rename = "PIA")]
    Pia,
    #[serde(rename = "PIAN")]
    Pian,
    #[serde(rename = "PIA-SDE")]
    PiaSde,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::NaiveAttack,
        MethodKind::SecMi,
        MethodKind::Pia,
        MethodKind::Pian,
        MethodKind::PiaSde,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MethodKind::NaiveAttack => "NA",
            MethodKind::SecMi => "SecMI",
            MethodKind::Pia => "PIA",
            MethodKind::Pian => "PIAN",
            MethodKind::PiaSde => "PIA-SDE",
        }
    }

    /// Human-facing label; the t-error baseline follows a high-level
    /// description only, hence the suffix.
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::SecMi => "SecMI-style",
            other => other.tag(),
        }
    }

    pub fn needs_continuous(self) -> bool {
        self == MethodKind::PiaSde
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown attack method `{s}`")))
    }
}

/// A fully parameterized attack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackMethod {
    pub kind: MethodKind,
    pub t: Time,
    pub p: f64,
    /// Noising steps for SecMI; ignored elsewhere.
    pub k_steps: usize,
    /// Noise seed for NA; ignored elsewhere.
    pub seed: u64,
}

impl AttackMethod {
    pub fn new(kind: MethodKind, t: impl Into<Time>, p: f64) -> Self {
        Self {
            kind,
            t: t.into(),
            p,
            k_steps: 10,
            seed: 0,
        }
    }

    pub fn with_k_steps(mut self, k: usize) -> Self {
        self.k_steps = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Queries one call of this method costs.
    pub fn query_cost(&self) -> u64 {
        match self.kind {
            MethodKind::NaiveAttack => 1,
            MethodKind::Pia | MethodKind::Pian | MethodKind::PiaSde => 2,
            MethodKind::SecMi => 2 * self.k_steps as u64 + 2,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(Error::invalid(format!("norm order p must be >= 1, got {}", self.p)));
        }
        if self.kind.needs_continuous() != sched.is_continuous() {
            return Err(Error::invalid(format!(
                "{} needs a {} schedule",
                self.kind,
                if self.kind.needs_continuous() { "continuous" } else { "discrete" }
            )));
        }
        sched.model_time(self.t)?;
        match (self.kind, self.t) {
            (MethodKind::PiaSde, Time::Continuous(t)) if t <= 0.0 => {
                Err(Error::invalid("PIA-SDE needs t > 0"))
            }
            (MethodKind::SecMi, Time::Step(t)) => secmi_stride(t, self.k_steps).map(|_| ()),
            (_, Time::Step(0)) => Err(Error::invalid("attack time must be > 0")),
            _ => Ok(()),
        }
    }

    /// Score of one sample and the queries actually spent on it.
    pub fn score(
        &self,
        model: &(impl NoisePredictor + ?Sized),
        x0: &Tensor,
        sample_id: usize,
        sched: &NoiseSchedule,
    ) -> Result<(f64, u64)> {
        let counted = Counted::new(model);
        let m = &counted;
        let score = match self.kind {
            MethodKind::NaiveAttack => {
                let seed = rng::split_seed(self.seed, sample_id as u64);
                naive_attack(m, x0, sched, self.t, self.p, seed)?
            }
            MethodKind::Pia => pia_score(m, x0, sched, self.t, self.p)?,
            MethodKind::Pian => pian_score(m, x0, sched, self.t, self.p)?,
            MethodKind::SecMi => {
                let Time::Step(t) = self.t else {
                    return Err(Error::invalid("SecMI needs a discrete time"));
                };
                secmi_score(m, x0, sched, t, self.k_steps, self.p)?
            }
            MethodKind::PiaSde => {
                let (NoiseSchedule::Continuous(sde), Time::Continuous(t)) = (sched, self.t) else {
                    return Err(Error::invalid("PIA-SDE needs a continuous schedule and time"));
                };
                pia_sde_score(m, sde, x0, t, self.p)?
            }
        };
        if !score.is_finite() {
            return Err(Error::NonFinite("attack score"));
        }
        Ok((score, counted.local_queries()))
    }
}

/// One sample's attack outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackScore {
    pub sample_id: usize,
    /// Ground truth; only evaluation looks at it.
    pub is_member: bool,
    pub method: MethodKind,
    pub t: Time,
    pub p: f64,
    pub score: f64,
    pub queries: u64,
}

/// Naive loss attack: fresh `ε ~ N(0, I)` from `seed`, score
/// `‖ε − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) ε, t)‖_p`.
pub fn naive_attack<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: impl Into<Time>,
    p: f64,
    seed: u64,
) -> Result<f64> {
    let t = t.into();
    let eps = Tensor::new(
        x0.shape().to_vec(),
        rng::standard_normal(&mut rng::rng(seed, Stream::Attack), x0.len()),
    )?;
    let x_t = diffusion::forward_marginal(x0, t, &eps, sched)?;
    let pred = model.predict(&x_t, sched.model_time(t)?)?;
    lp_norm(&eps.sub(&pred)?, p)
}

fn proximal_residual<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    eps0: &Tensor,
    sched: &NoiseSchedule,
    t: Time,
    p: f64,
) -> Result<f64> {
    let x_t = groundtruth_point(x0, eps0, t, sched)?;
    let eps_t = model.predict(&x_t, sched.model_time(t)?)?;
    lp_norm(&eps0.sub(&eps_t)?, p)
}

/// Proximal initialization score
/// `R = ‖ε̄₀ − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) ε̄₀, t)‖_p` with `ε̄₀ = ε_θ(x0, 0)`.
pub fn pia_score<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: impl Into<Time>,
    p: f64,
) -> Result<f64> {
    let eps0 = proximal_eps(model, x0)?;
    proximal_residual(model, x0, &eps0, sched, t.into(), p)
}

/// `N √(π/2) · eps / ‖eps‖₁`.
pub fn pian_normalize(eps: &Tensor) -> Result<Tensor> {
    let l1: f64 = eps.data().iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot normalize an all-zero noise estimate".into(),
        ));
    }
    eps.scale(eps.len() as f64 * (PI / 2.0).sqrt() / l1)
}

/// PIA with the proximal noise normalized by [`pian_normalize`], used both
/// to build `x_t` and in the residual.
pub fn pian_score<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: impl Into<Time>,
    p: f64,
) -> Result<f64> {
    let eps0 = pian_normalize(&proximal_eps(model, x0)?)?;
    proximal_residual(model, x0, &eps0, sched, t.into(), p)
}

fn secmi_stride(t: usize, k_steps: usize) -> Result<usize> {
    if k_steps == 0 {
        return Err(Error::invalid("SecMI needs k_steps >= 1"));
    }
    if t == 0 || !t.is_multiple_of(k_steps) {
        return Err(Error::invalid(format!(
            "SecMI time {t} is not reachable in {k_steps} uniform steps"
        )));
    }
    Ok(t / k_steps)
}

/// Deterministic noising step from `s` to a later `s_next`, with one
/// fixed-point correction so it inverts the DDIM denoising step. Two queries.
fn corrected_noising_step<M: NoisePredictor + ?Sized>(
    model: &M,
    x_s: &Tensor,
    s: usize,
    s_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (ab_s, ab_next) = (sched.alpha_bar(Time::Step(s))?, sched.alpha_bar(Time::Step(s_next))?);
    let eps = model.predict(x_s, sched.model_time(Time::Step(s))?)?;
    let predicted = ddim_update(x_s, &eps, ab_s, ab_next)?;
    let eps = model.predict(&predicted, sched.model_time(Time::Step(s_next))?)?;
    ddim_update(x_s, &eps, ab_s, ab_next)
}

/// SecMI-style t-error.
///
/// Maps `x0` to `x_t` with `k_steps` deterministic noising steps of stride
/// `t / k_steps`, denoises one stride to `t − Δ`, renoises back to `t`, and
/// returns `‖x_t − x̃_t‖_p`. Costs `2 k_steps + 2` queries.
pub fn secmi_score<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: usize,
    k_steps: usize,
    p: f64,
) -> Result<f64> {
    let stride = secmi_stride(t, k_steps)?;
    let mut x = x0.clone();
    for i in 0..k_steps {
        x = corrected_noising_step(model, &x, i * stride, (i + 1) * stride, sched)?;
    }
    let back = t - stride;
    let (ab_t, ab_back) = (sched.alpha_bar(Time::Step(t))?, sched.alpha_bar(Time::Step(back))?);
    let denoised = diffusion::ddim_step(model, &x, t, back, sched)?;
    let eps = model.predict(&denoised, sched.model_time(Time::Step(back))?)?;
    let renoised = ddim_update(&denoised, &eps, ab_back, ab_t)?;
    lp_norm(&x.sub(&renoised)?, p)
}

/// Continuous-time score: `x_t` built from the proximal noise, then the
/// norm of the probability-flow drift there.
pub fn pia_sde_score<M: NoisePredictor + ?Sized>(
    model: &M,
    sde: &VpSde,
    x0: &Tensor,
    t: f64,
    p: f64,
) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("PIA-SDE needs t in (0, 1], got {t}")));
    }
    let eps0 = proximal_eps(model, x0)?;
    let x_t = mix(x0, &eps0, sde.alpha_bar(t)?)?;
    let drift = diffusion::ode_drift(sde, model, &x_t, t)?;
    lp_norm(&drift, p)
}

/// Distance `‖x_{t'} − x'_{t'}‖_p` between the ground-truth point at the
/// earlier time `t_target` and the DDIM prediction from the ground-truth
/// point at `t`, both on the proximal trajectory. Two queries.
pub fn trajectory_distance<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: usize,
    t_target: usize,
    p: f64,
) -> Result<f64> {
    let eps0 = proximal_eps(model, x0)?;
    let x_t = groundtruth_point(x0, &eps0, t, sched)?;
    let truth = groundtruth_point(x0, &eps0, t_target, sched)?;
    let predicted = diffusion::ddim_step(model, &x_t, t, t_target, sched)?;
    lp_norm(&truth.sub(&predicted)?, p)
}

/// `|c(t, t')|` with `c = (√(1−ᾱ_{t'}) √ᾱ_t − √(1−ᾱ_t) √ᾱ_{t'}) / √ᾱ_t`,
/// the factor relating [`trajectory_distance`] to [`pia_score`].
pub fn cancellation_coefficient(sched: &NoiseSchedule, t: usize, t_target: usize) -> Result<f64> {
    let ab_t = sched.alpha_bar(Time::Step(t))?;
    let ab_s = sched.alpha_bar(Time::Step(t_target))?;
    Ok((((1.0 - ab_s).sqrt() * ab_t.sqrt() - (1.0 - ab_t).sqrt() * ab_s.sqrt()) / ab_t.sqrt()).abs())
}

/// RMS error of the one-step reconstruction of `x0` from a noised copy at
/// `t`, with noise drawn from `seed`. One query.
pub fn reconstruction_error<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    t: impl Into<Time>,
    seed: u64,
) -> Result<f64> {
    let t = t.into();
    let eps = Tensor::new(
        x0.shape().to_vec(),
        rng::standard_normal(&mut rng::rng(seed, Stream::Attack), x0.len()),
    )?;
    let x_t = diffusion::forward_marginal(x0, t, &eps, sched)?;
    let pred = model.predict(&x_t, sched.model_time(t)?)?;
    Ok(reconstruct_x0(&x_t, &pred, t, sched)?.sub(x0)?.rms())
}

/// `score < tau` means predicted member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdClassifier {
    pub tau: f64,
}

impl ThresholdClassifier {
    pub fn is_member(&self, score: f64) -> bool {
        score < self.tau
    }
}

pub fn classify(score: &AttackScore, tau: f64) -> bool {
    ThresholdClassifier { tau }.is_member(score.score)
}

/// A sample to be scored.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub sample_id: usize,
    pub is_member: bool,
    pub x0: &'a Tensor,
}

/// Scores every target with `method`, checking the per-call query contract.
/// Output order follows `targets`.
pub fn score_targets<M: NoisePredictor + ?Sized>(
    model: &M,
    targets: &[Target<'_>],
    method: &AttackMethod,
    sched: &NoiseSchedule,
    exec: Execution,
) -> Result<Vec<AttackScore>> {
    method.validate(sched)?;
    parallel::try_map(exec, targets, |tg| {
        let (score, queries) = method.score(model, tg.x0, tg.sample_id, sched)?;
        if queries != method.query_cost() {
            return Err(Error::UnsupportedOperation(format!(
                "{} spent {queries} queries, contract is {}",
                method.kind,
                method.query_cost()
            )));
        }
        Ok(AttackScore {
            sample_id: tg.sample_id,
            is_member: tg.is_member,
            method: method.kind,
            t: method.t,
            p: method.p,
            score,
            queries,
        })
    })
}
