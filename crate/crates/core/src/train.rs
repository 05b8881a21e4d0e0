//! Minimizes the DDPM noise-prediction loss with Adam.

use std::time::{Duration, Instant};

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::rng::{self, Stream};
use crate::schedule::{NoiseSchedule, Time};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Independent `(t, ε)` draws per sample in every batch. Values above
    /// one average the loss over several noise draws per step.
    pub noise_draws: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Lower end of the continuous training-time range.
    pub continuous_t_min: f64,
    /// Epoch index the run starts at; seeds per-epoch streams so that
    /// resumed runs draw fresh noise.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 16,
            noise_draws: 1,
            adam: AdamConfig::default(),
            seed: 0,
            continuous_t_min: 1e-3,
            start_epoch: 0,
        }
    }
}

/// Mean loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub epoch_losses: Vec<f64>,
}

impl LossTrace {
    fn window_mean(&self, from: usize, to: usize) -> Option<f64> {
        let w = self.epoch_losses.get(from..to)?;
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Mean over the first 10% of epochs (at least one).
    pub fn head_mean(&self) -> Option<f64> {
        let k = (self.epoch_losses.len() / 10).max(1);
        self.window_mean(0, k)
    }

    /// Mean over the last 10% of epochs (at least one).
    pub fn tail_mean(&self) -> Option<f64> {
        let n = self.epoch_losses.len();
        let k = (n / 10).max(1);
        self.window_mean(n.saturating_sub(k), n)
    }

    pub fn first(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }
}

/// Draws a training time for one sample.
fn sample_time(r: &mut rng::Rng, sched: &NoiseSchedule, t_min: f64) -> Time {
    match sched {
        NoiseSchedule::Discrete(s) => Time::Step(r.random_range(1..=s.steps())),
        NoiseSchedule::Continuous(_) => Time::Continuous(r.random_range(t_min..=1.0)),
    }
}

/// Mean-over-batch squared-error loss and its parameter gradients.
pub fn batch_loss_and_grad(
    model: &EpsilonModel,
    samples: &[&[f64]],
    times: &[Time],
    noise: &[Vec<f64>],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    let dim = model.arch().sample_dim;
    let mut noised = Vec::with_capacity(samples.len());
    let mut taus = Vec::with_capacity(samples.len());
    for ((x0, &t), eps) in samples.iter().zip(times).zip(noise) {
        let ab = sched.alpha_bar(t)?;
        noised.push(
            x0.iter()
                .zip(eps)
                .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect::<Vec<f64>>(),
        );
        taus.push(sched.model_time(t)?);
    }
    let rows: Vec<&[f64]> = noised.iter().map(Vec::as_slice).collect();
    let input = model.input_matrix(&rows, &taus)?;
    let target = Tensor::new(vec![samples.len(), dim], noise.concat())?;
    let batch = samples.len() as f64;

    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p.clone())).collect();
    let iv = tape.constant(input);
    let out = model.forward_on_tape(&mut tape, &vars, iv)?;
    let tv = tape.constant(target);
    let diff = tape.sub(tv, out)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / batch)?;
    let value = tape.value(loss)?.data()[0];
    let grads = tape.backward(loss)?;
    let g = vars.iter().map(|&v| grads.get(v)).collect::<Result<_>>()?;
    Ok((value, g))
}

/// Trains `model` on `samples` for `cfg.epochs` epochs.
///
/// With a `budget`, aborts with [`Error::BudgetExceeded`] once the wall
/// time passes it.
pub fn train(
    mut model: EpsilonModel,
    samples: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    budget: Option<Duration>,
) -> Result<(EpsilonModel, LossTrace)> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if cfg.noise_draws == 0 {
        return Err(Error::invalid("noise_draws must be positive"));
    }
    let dim = model.arch().sample_dim;
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::ShapeMismatch {
            expected: vec![dim],
            actual: s.shape().to_vec(),
        });
    }
    let mut adam = AdamState::new(model.params(), cfg.adam)?;
    let mut trace = LossTrace::default();
    let started = Instant::now();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for e in 0..cfg.epochs {
        let epoch = cfg.start_epoch + e;
        let mut shuffle = rng::indexed_rng(cfg.seed, Stream::Shuffle, epoch as u64);
        let mut time_rng = rng::indexed_rng(cfg.seed, Stream::Timestep, epoch as u64);
        let mut noise_rng = rng::indexed_rng(cfg.seed, Stream::Noise, epoch as u64);
        order.shuffle(&mut shuffle);

        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = (0..cfg.noise_draws)
                .flat_map(|_| chunk.iter().map(|&i| samples[i].data()))
                .collect();
            let ts: Vec<Time> = xs
                .iter()
                .map(|_| sample_time(&mut time_rng, sched, cfg.continuous_t_min))
                .collect();
            let noise: Vec<Vec<f64>> =
                xs.iter().map(|_| rng::standard_normal(&mut noise_rng, dim)).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &xs, &ts, &noise, sched)
                .map_err(|err| diverged(err, epoch))?;
            adam.step(model.params_mut(), &grads).map_err(|err| diverged(err, epoch))?;
            sum += loss * chunk.len() as f64;
        }
        let mean = sum / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.epoch_losses.push(mean);

        if let Some(b) = budget {
            if started.elapsed() > b {
                return Err(Error::BudgetExceeded {
                    epoch,
                    budget_secs: b.as_secs(),
                });
            }
        }
    }
    Ok((model, trace))
}

fn diverged(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::TrainingDiverged { epoch },
        other => other,
    }
}
