use pialab_core::attacks::{cancellation_coefficient, pia_score, pia_sde_score, trajectory_distance};
use pialab_core::diffusion::{ddim_step, groundtruth_point, ode_drift, reconstruct_x0};
use pialab_core::model::{EpsilonModel, ModelArch, NoisePredictor};
use pialab_core::rng::{self, standard_normal, Stream};
use pialab_core::schedule::{DiscreteSchedule, NoiseSchedule, VpSde};
use pialab_core::{lp_norm, Result, Tensor, Time};
use proptest::prelude::*;

const T: usize = 100;

fn discrete() -> NoiseSchedule {
    NoiseSchedule::Discrete(DiscreteSchedule::linear(T, 1e-4, 0.02).unwrap())
}

/// Noise that maps a fixed point-mass `x0` to the input at the queried time.
struct PointMass {
    x0: Tensor,
    sched: NoiseSchedule,
}

impl PointMass {
    fn alpha_bar_at(&self, tau: f64) -> Result<f64> {
        match &self.sched {
            NoiseSchedule::Discrete(s) => {
                self.sched.alpha_bar(Time::Step((tau * s.steps() as f64).round() as usize + 1))
            }
            NoiseSchedule::Continuous(_) => self.sched.alpha_bar(Time::Continuous(tau)),
        }
    }
}

impl NoisePredictor for PointMass {
    fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        let ab = self.alpha_bar_at(tau)?;
        if ab >= 1.0 {
            return Ok(Tensor::zeros(x.shape()));
        }
        x.axpby(1.0, &self.x0, -ab.sqrt())?.scale(1.0 / (1.0 - ab).sqrt())
    }

    fn query_count(&self) -> u64 {
        0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_ddim_step_stays_on_the_trajectory(
        t in 2usize..=T,
        frac in 0.0f64..1.0,
        x in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed in 0u64..1000,
    ) {
        let s = discrete();
        let tp = ((t as f64) * frac) as usize;
        let x0 = Tensor::vector(x.clone());
        let eps = Tensor::vector(standard_normal(&mut rng::rng(seed, Stream::Noise), x.len()));
        let oracle = PointMass { x0: x0.clone(), sched: s.clone() };
        let x_t = groundtruth_point(&x0, &eps, t, &s).unwrap();
        let landed = ddim_step(&oracle, &x_t, t, tp, &s).unwrap();
        let truth = groundtruth_point(&x0, &eps, tp, &s).unwrap();
        for (a, b) in landed.data().iter().zip(truth.data()) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
        let back = reconstruct_x0(&x_t, &eps, t, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn trajectory_distance_is_a_fixed_multiple_of_pia(
        t in 2usize..=T,
        frac in 0.0f64..1.0,
        seed in 0u64..50,
        p in 1.0f64..7.0,
    ) {
        let s = discrete();
        let tp = ((t as f64) * frac) as usize;
        let model = EpsilonModel::new(ModelArch::standard(2), seed).unwrap();
        let c = cancellation_coefficient(&s, t, tp).unwrap();
        for i in 0..4 {
            let x0 = Tensor::vector(standard_normal(&mut rng::indexed_rng(seed, Stream::Data, i), 2));
            let r = pia_score(&model, &x0, &s, t, p).unwrap();
            let d = trajectory_distance(&model, &x0, &s, t, tp, p).unwrap();
            prop_assert!((d - c * r).abs() <= 1e-8 * d.max(1e-300), "d {d}, c {c}, R {r}");
        }
    }
}

#[test]
fn ode_drift_of_point_mass_is_the_trajectory_velocity() {
    let sde = VpSde::new(0.1, 20.0).unwrap();
    let sched = NoiseSchedule::Continuous(sde);
    let x0 = Tensor::vector(vec![0.7, -1.3, 0.2]);
    let eps = Tensor::vector(vec![-0.4, 0.9, 1.6]);
    let oracle = PointMass {
        x0: x0.clone(),
        sched: sched.clone(),
    };
    let point = |t: f64| groundtruth_point(&x0, &eps, Time::Continuous(t), &sched).unwrap();
    for t in [0.05, 0.2, 0.5, 0.8] {
        let h = 1e-6;
        let velocity = point(t + h).sub(&point(t - h)).unwrap().scale(0.5 / h).unwrap();
        let drift = ode_drift(&sde, &oracle, &point(t), t).unwrap();
        for (v, d) in velocity.data().iter().zip(drift.data()) {
            assert!((v - d).abs() <= 1e-6 * v.abs().max(1.0), "t={t}: {v} vs {d}");
        }
        let score = pia_sde_score(&oracle, &sde, &x0, t, 2.0).unwrap();
        assert!(score.is_finite());
    }
}

/// Euler–Maruyama paths of `dx = −½β(t) x dt + √β(t) dW` must match the
/// closed-form marginal `N(√ᾱ(t) x0, (1 − ᾱ(t)) I)`.
#[test]
fn vp_marginals_match_simulated_paths() {
    let sde = VpSde::new(0.1, 20.0).unwrap();
    let paths = 20_000;
    let steps = 400;
    let x0 = 1.5;
    let t_end = 0.4;
    let dt = t_end / steps as f64;
    let mut r = rng::rng(17, Stream::Noise);
    let mut xs = vec![x0; paths];
    for k in 0..steps {
        let t = k as f64 * dt;
        let b = sde.beta(t).unwrap();
        let dw = standard_normal(&mut r, paths);
        for (x, w) in xs.iter_mut().zip(dw) {
            *x += -0.5 * b * *x * dt + (b * dt).sqrt() * w;
        }
    }
    let mean = xs.iter().sum::<f64>() / paths as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    let ab = sde.alpha_bar(t_end).unwrap();
    let (want_mean, want_var) = (ab.sqrt() * x0, 1.0 - ab);
    // Five standard errors, plus the O(dt) discretization bias.
    let se_mean = (want_var / paths as f64).sqrt();
    let se_var = want_var * (2.0 / paths as f64).sqrt();
    assert!((mean - want_mean).abs() < 5.0 * se_mean + 0.01, "mean {mean} vs {want_mean}");
    assert!((var - want_var).abs() < 5.0 * se_var + 0.01, "var {var} vs {want_var}");
}

#[test]
fn pia_uses_the_proximal_noise() {
    let s = discrete();
    let model = EpsilonModel::new(ModelArch::standard(2), 8).unwrap();
    let x0 = Tensor::vector(vec![0.1, 0.2]);
    let eps0 = model.predict(&x0, 0.0).unwrap();
    let x_t = groundtruth_point(&x0, &eps0, 30usize, &s).unwrap();
    let pred = model.predict(&x_t, s.model_time(Time::Step(30)).unwrap()).unwrap();
    let want = lp_norm(&eps0.sub(&pred).unwrap(), 3.0).unwrap();
    assert_eq!(pia_score(&model, &x0, &s, 30usize, 3.0).unwrap(), want);
}
