//! Forward marginals, the DDPM objective, deterministic DDIM stepping,
//! ground-truth trajectories and the probability-flow drift.

use crate::error::{Error, Result};
use crate::model::NoisePredictor;
use crate::schedule::{NoiseSchedule, Time, VpSde};
use crate::tensor::Tensor;

/// `√ᾱ · x0 + √(1 − ᾱ) · eps`.
pub fn mix(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    x0.axpby(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Noised sample `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) eps`.
pub fn forward_marginal(
    x0: &Tensor,
    t: impl Into<Time>,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    mix(x0, eps, sched.alpha_bar(t.into())?)
}

/// Point at time `t` on the deterministic trajectory through `x0` whose
/// anchor noise is `eps0`, anchored at step 0 where `ᾱ = 1`.
pub fn groundtruth_point(
    x0: &Tensor,
    eps0: &Tensor,
    t: impl Into<Time>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    mix(x0, eps0, sched.alpha_bar(t.into())?)
}

/// Point at `ᾱ_t` on the deterministic trajectory fixed by `x0` and any
/// other point `x_k` (at `ᾱ_k < 1`):
/// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) (x_k − √ᾱ_k x0) / √(1−ᾱ_k)`.
pub fn trajectory_point(
    x0: &Tensor,
    x_k: &Tensor,
    alpha_bar_k: f64,
    alpha_bar_t: f64,
) -> Result<Tensor> {
    if alpha_bar_k >= 1.0 {
        return Err(Error::DivisionByZero(
            "anchor point has alpha_bar = 1, so it carries no noise direction".into(),
        ));
    }
    let eps = x_k.axpby(1.0, x0, -alpha_bar_k.sqrt())?.scale(1.0 / (1.0 - alpha_bar_k).sqrt())?;
    mix(x0, &eps, alpha_bar_t)
}

/// Squared-error DDPM loss `‖eps − ε_θ(x_t, t)‖²`, summed over elements.
pub fn ddpm_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    t: impl Into<Time>,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let t = t.into();
    let x_t = forward_marginal(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, sched.model_time(t)?)?;
    Ok(eps.sub(&pred)?.squared_norm())
}

/// Deterministic DDIM update from `ᾱ_t` to `ᾱ_next` given a noise estimate:
/// `(√ᾱ_next/√ᾱ_t) · (x_t − (√(1−ᾱ_t) − (√ᾱ_t/√ᾱ_next) √(1−ᾱ_next)) · eps)`.
pub fn ddim_update(x_t: &Tensor, eps: &Tensor, alpha_bar_t: f64, alpha_bar_next: f64) -> Result<Tensor> {
    if alpha_bar_t <= 0.0 || alpha_bar_next <= 0.0 {
        return Err(Error::DivisionByZero("DDIM step needs alpha_bar > 0".into()));
    }
    let ratio = (alpha_bar_next / alpha_bar_t).sqrt();
    let coef = (1.0 - alpha_bar_t).sqrt() - (1.0 - alpha_bar_next).sqrt() / ratio;
    x_t.axpby(ratio, eps, -ratio * coef)
}

/// One deterministic (`σ_t = 0`) DDIM denoising step from `t` to an earlier
/// `t_next`. Costs one model query.
pub fn ddim_step<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: impl Into<Time>,
    t_next: impl Into<Time>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (t, t_next) = (t.into(), t_next.into());
    if !is_earlier(t_next, t)? {
        return Err(Error::invalid(format!(
            "DDIM step must go to an earlier time, got {t} -> {t_next}"
        )));
    }
    let (ab_t, ab_next) = (sched.alpha_bar(t)?, sched.alpha_bar(t_next)?);
    let eps = model.predict(x_t, sched.model_time(t)?)?;
    ddim_update(x_t, &eps, ab_t, ab_next)
}

fn is_earlier(a: Time, b: Time) -> Result<bool> {
    match (a, b) {
        (Time::Step(a), Time::Step(b)) => Ok(a < b),
        (Time::Continuous(a), Time::Continuous(b)) => Ok(a < b),
        _ => Err(Error::invalid("cannot compare discrete and continuous times")),
    }
}

/// The proximal noise estimate `ε_θ(x0, 0)`: one query at time zero.
pub fn proximal_eps<M: NoisePredictor + ?Sized>(model: &M, x0: &Tensor) -> Result<Tensor> {
    model.predict(x0, 0.0)
}

/// Score estimate `s_θ(x, t) = −ε_θ(x, t) / √(1 − ᾱ_t)`. One query.
pub fn score_from_eps<M: NoisePredictor + ?Sized>(
    model: &M,
    x: &Tensor,
    t: impl Into<Time>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let t = t.into();
    let ab = sched.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DivisionByZero(format!(
            "score is undefined at time {t} where alpha_bar = 1"
        )));
    }
    let eps = model.predict(x, sched.model_time(t)?)?;
    eps.scale(-1.0 / (1.0 - ab).sqrt())
}

/// `f_t(x) − ½ g_t² s` for a given score value.
pub fn drift_from_score(sde: &VpSde, x: &Tensor, score: &Tensor, t: f64) -> Result<Tensor> {
    x.axpby(sde.drift_coefficient(t)?, score, -0.5 * sde.g_squared(t)?)
}

/// Probability-flow ODE drift `f_t(x) − ½ g_t² s_θ(x, t)`. One query.
pub fn ode_drift<M: NoisePredictor + ?Sized>(
    sde: &VpSde,
    model: &M,
    x: &Tensor,
    t: f64,
) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("ODE drift needs t in (0, 1], got {t}")));
    }
    let sched = NoiseSchedule::Continuous(*sde);
    let score = score_from_eps(model, x, t, &sched)?;
    drift_from_score(sde, x, &score, t)
}

/// Recovers `x0` from `x_t` and a noise estimate:
/// `(x_t − √(1−ᾱ_t) eps) / √ᾱ_t`.
pub fn reconstruct_x0(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: impl Into<Time>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(t.into())?;
    if ab <= 0.0 {
        return Err(Error::DivisionByZero("reconstruction needs alpha_bar > 0".into()));
    }
    x_t.axpby(1.0 / ab.sqrt(), eps_pred, -((1.0 - ab) / ab).sqrt())
}

#[cfg(test)]
pub(crate) mod stubs {
    //! Hand-written predictors with known outputs.
    use super::*;
    use crate::model::QueryCounter;

    pub struct Fixed<F: Fn(&Tensor, f64) -> Tensor + Sync> {
        pub f: F,
        pub queries: QueryCounter,
    }

    impl<F: Fn(&Tensor, f64) -> Tensor + Sync> Fixed<F> {
        pub fn new(f: F) -> Self {
            Self {
                f,
                queries: QueryCounter::default(),
            }
        }
    }

    impl<F: Fn(&Tensor, f64) -> Tensor + Sync> NoisePredictor for Fixed<F> {
        fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
            self.queries.tick();
            Ok((self.f)(x, tau))
        }

        fn query_count(&self) -> u64 {
            self.queries.get()
        }
    }

    pub fn zero() -> Fixed<impl Fn(&Tensor, f64) -> Tensor + Sync> {
        Fixed::new(|x: &Tensor, _| Tensor::zeros(x.shape()))
    }

    pub fn identity() -> Fixed<impl Fn(&Tensor, f64) -> Tensor + Sync> {
        Fixed::new(|x: &Tensor, _| x.clone())
    }

    pub fn constant(c: Tensor) -> Fixed<impl Fn(&Tensor, f64) -> Tensor + Sync> {
        Fixed::new(move |_: &Tensor, _| c.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::schedule::DiscreteSchedule;
    use crate::model::{EpsilonModel, ModelArch};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::Discrete(DiscreteSchedule::linear(100, 1e-4, 0.2).unwrap())
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn forward_marginal_limits() {
        let x0 = Tensor::vector(vec![1.0, 0.0]);
        let eps = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(mix(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(mix(&x0, &eps, 0.0).unwrap(), eps);
        let m = mix(&x0, &eps, 0.64).unwrap();
        assert!(close(&m, &Tensor::vector(vec![0.8, 0.6]), 1e-15));
        assert_eq!(forward_marginal(&x0, 0usize, &eps, &sched()).unwrap(), x0);
        assert!(forward_marginal(&x0, 1usize, &Tensor::vector(vec![1.0]), &sched()).is_err());
    }

    #[test]
    fn ddpm_loss_with_stubs() {
        let s = sched();
        let x0 = Tensor::vector(vec![0.3, -0.4]);
        let eps = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(ddpm_loss(&zero(), &x0, 10usize, &eps, &s).unwrap(), 2.0);
        // A predictor that recovers the injected noise exactly.
        let ab = s.alpha_bar(Time::Step(10)).unwrap();
        let x0c = x0.clone();
        let perfect = Fixed::new(move |x: &Tensor, _| {
            x.axpby(1.0, &x0c, -ab.sqrt()).unwrap().scale(1.0 / (1.0 - ab).sqrt()).unwrap()
        });
        assert!(ddpm_loss(&perfect, &x0, 10usize, &eps, &s).unwrap() < 1e-24);
    }

    #[test]
    fn ddpm_loss_matches_straight_line_evaluation() {
        let s = sched();
        let m = EpsilonModel::new(ModelArch::standard(2), 3).unwrap();
        let x0 = Tensor::vector(vec![0.5, -1.5]);
        let eps = Tensor::vector(vec![-0.2, 0.9]);
        let got = ddpm_loss(&m, &x0, 37usize, &eps, &s).unwrap();
        let ab = s.alpha_bar(Time::Step(37)).unwrap();
        let xt: Vec<f64> = (0..2)
            .map(|i| ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i])
            .collect();
        let pred = m.predict(&Tensor::vector(xt), 0.36).unwrap();
        let expected: f64 = (0..2).map(|i| (eps.data()[i] - pred.data()[i]).powi(2)).sum();
        assert_eq!(got, expected);
    }

    #[test]
    fn ddim_step_zero_prediction_rescales() {
        let s = sched();
        let x = Tensor::vector(vec![1.0, -2.0]);
        let got = ddim_step(&zero(), &x, 30usize, 12usize, &s).unwrap();
        let r = (s.alpha_bar(Time::Step(12)).unwrap() / s.alpha_bar(Time::Step(30)).unwrap()).sqrt();
        assert!(close(&got, &x.scale(r).unwrap(), 1e-15));
        assert!(ddim_step(&zero(), &x, 12usize, 12usize, &s).is_err());
        assert!(ddim_step(&zero(), &x, 12usize, 30usize, &s).is_err());
    }

    #[test]
    fn ddim_step_with_oracle_lands_on_trajectory_and_is_pure() {
        let s = sched();
        let x0 = Tensor::vector(vec![0.7, -0.1, 1.2]);
        let eps0 = Tensor::vector(vec![-0.5, 1.3, 0.2]);
        let oracle = constant(eps0.clone());
        let x_t = groundtruth_point(&x0, &eps0, 60usize, &s).unwrap();
        let a = ddim_step(&oracle, &x_t, 60usize, 25usize, &s).unwrap();
        let b = ddim_step(&oracle, &x_t, 60usize, 25usize, &s).unwrap();
        assert_eq!(a, b);
        let target = groundtruth_point(&x0, &eps0, 25usize, &s).unwrap();
        assert!(close(&a, &target, 1e-10));
        assert_eq!(oracle.query_count(), 2);
    }

    #[test]
    fn groundtruth_and_general_trajectory() {
        let s = sched();
        let x0 = Tensor::vector(vec![2.0]);
        assert_eq!(groundtruth_point(&x0, &Tensor::vector(vec![5.0]), 0usize, &s).unwrap(), x0);
        let ab = s.alpha_bar(Time::Step(40)).unwrap();
        assert_eq!(
            groundtruth_point(&x0, &Tensor::zeros(&[1]), 40usize, &s).unwrap(),
            Tensor::vector(vec![2.0 * ab.sqrt()])
        );
        let p = trajectory_point(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0]), 0.5, 0.8)
            .unwrap();
        assert!((p.data()[0] - 0.632_455_532_033_675_9).abs() < 1e-12);
        assert!(trajectory_point(&x0, &x0, 1.0, 0.5).is_err());
    }

    #[test]
    fn proximal_eps_queries_time_zero() {
        let x0 = Tensor::vector(vec![0.1, 0.2]);
        let id = identity();
        assert_eq!(proximal_eps(&id, &x0).unwrap(), x0);
        assert_eq!(id.query_count(), 1);
        let seen = Fixed::new(|x: &Tensor, tau| Tensor::full(x.shape(), tau));
        assert_eq!(proximal_eps(&seen, &x0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn score_from_eps_examples() {
        let s = NoiseSchedule::Discrete(DiscreteSchedule::from_betas(vec![0.25]).unwrap());
        let one = constant(Tensor::vector(vec![1.0]));
        let score = score_from_eps(&one, &Tensor::vector(vec![0.0]), 1usize, &s).unwrap();
        assert!((score.data()[0] + 2.0).abs() < 1e-15);
        let z = score_from_eps(&zero(), &Tensor::vector(vec![3.0]), 1usize, &s).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(matches!(
            score_from_eps(&one, &Tensor::vector(vec![0.0]), 0usize, &s),
            Err(Error::DivisionByZero(_))
        ));
    }

    #[test]
    fn ode_drift_examples() {
        let sde = VpSde::default();
        let x = Tensor::vector(vec![1.5, -0.5]);
        let d = ode_drift(&sde, &zero(), &x, 0.4).unwrap();
        assert!(close(&d, &x.scale(-0.5 * sde.beta(0.4).unwrap()).unwrap(), 1e-15));
        let d0 = ode_drift(&sde, &zero(), &Tensor::zeros(&[2]), 0.4).unwrap();
        assert_eq!(d0.data(), &[0.0, 0.0]);
        assert!(ode_drift(&sde, &zero(), &x, 0.0).is_err());

        // β ≡ 0.5, x = 2, s = −1: f = −0.5, −½·0.5·(−1) = +0.25.
        let flat = VpSde::new(0.5, 0.5).unwrap();
        let d = drift_from_score(&flat, &Tensor::vector(vec![2.0]), &Tensor::vector(vec![-1.0]), 0.7)
            .unwrap();
        assert!((d.data()[0] + 0.25).abs() < 1e-15);
        // Same through a predictor whose score is −1 everywhere.
        let minus_one_score = Fixed::new(move |_: &Tensor, tau| {
            Tensor::vector(vec![(1.0 - flat.alpha_bar(tau).unwrap()).sqrt()])
        });
        let d = ode_drift(&flat, &minus_one_score, &Tensor::vector(vec![2.0]), 0.7).unwrap();
        assert!((d.data()[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_inverts_forward_marginal() {
        let s = sched();
        let x0 = Tensor::vector(vec![0.4, -2.0]);
        let eps = Tensor::vector(vec![1.1, 0.3]);
        let x_t = forward_marginal(&x0, 50usize, &eps, &s).unwrap();
        assert!(close(&reconstruct_x0(&x_t, &eps, 50usize, &s).unwrap(), &x0, 1e-10));
        let ab = s.alpha_bar(Time::Step(50)).unwrap();
        let r = reconstruct_x0(&x_t, &Tensor::zeros(&[2]), 50usize, &s).unwrap();
        assert!(close(&r, &x_t.scale(1.0 / ab.sqrt()).unwrap(), 1e-15));
    }
}
