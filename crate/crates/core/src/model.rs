//! The noise-prediction network `ε_θ(x, t)` and the trait attacks query it
//! through.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{matmul_into, silu, Tape, Var};
use crate::tensor::Tensor;

/// Anything that predicts the injected noise of a sample at a model time
/// `tau ∈ [0, 1]`. Every call to [`NoisePredictor::predict`] is one query.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor>;

    /// Total queries answered so far.
    fn query_count(&self) -> u64;
}

impl<M: NoisePredictor + ?Sized> NoisePredictor for &M {
    fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        (**self).predict(x, tau)
    }

    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
}

/// Thread-safe monotone query counter.
#[derive(Debug, Default)]
pub struct QueryCounter(AtomicU64);

impl QueryCounter {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }

    pub fn tick(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for QueryCounter {
    fn clone(&self) -> Self {
        Self::new(self.get())
    }
}

/// Wraps a predictor and counts the queries made through this handle only,
/// while still forwarding them to (and counting them on) the inner model.
pub struct Counted<'a, M: ?Sized> {
    inner: &'a M,
    local: QueryCounter,
}

impl<'a, M: NoisePredictor + ?Sized> Counted<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            local: QueryCounter::default(),
        }
    }

    pub fn local_queries(&self) -> u64 {
        self.local.get()
    }
}

impl<M: NoisePredictor + ?Sized> NoisePredictor for Counted<'_, M> {
    fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        self.local.tick();
        self.inner.predict(x, tau)
    }

    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub sample_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl ModelArch {
    /// Three hidden layers of width 128 and a 16-wide time embedding.
    pub fn standard(sample_dim: usize) -> Self {
        Self {
            sample_dim,
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sample_dim + self.time_embed_dim
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.sample_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Shapes of all parameter tensors in declaration order
    /// (`W1, b1, W2, b2, ...`).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_dim == 0 {
            return Err(Error::invalid("sample_dim must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be a positive even number"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `tau ∈ [0, 1]`, scaled to a 1000-step clock.
pub fn time_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = 1000.0 * tau;
    let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
    let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((s * f).sin(), (s * f).cos())).unzip();
    sin.into_iter().chain(cos).collect()
}

/// MLP noise predictor with SiLU activations.
#[derive(Debug, Clone)]
pub struct EpsilonModel {
    arch: ModelArch,
    params: Vec<Tensor>,
    queries: QueryCounter,
}

impl EpsilonModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::rng(seed, Stream::Init);
        let params = arch
            .layer_dims()
            .into_iter()
            .flat_map(|(i, o)| {
                let bound = (6.0 / (i + o) as f64).sqrt();
                let w: Vec<f64> = (0..i * o).map(|_| r.random_range(-bound..bound)).collect();
                [Tensor::from_parts(vec![i, o], w), Tensor::zeros(&[o])]
            })
            .collect();
        Ok(Self {
            arch,
            params,
            queries: QueryCounter::default(),
        })
    }

    pub fn from_params(arch: ModelArch, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "architecture has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::ShapeMismatch {
                    expected: s.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            arch,
            params,
            queries: QueryCounter::default(),
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Builds the `[batch, sample_dim + embed]` network input.
    pub fn input_matrix(&self, samples: &[&[f64]], taus: &[f64]) -> Result<Tensor> {
        if samples.len() != taus.len() || samples.is_empty() {
            return Err(Error::invalid("need one time per sample and a nonempty batch"));
        }
        let width = self.arch.input_dim();
        let mut data = Vec::with_capacity(samples.len() * width);
        for (x, &tau) in samples.iter().zip(taus) {
            if x.len() != self.arch.sample_dim {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.arch.sample_dim],
                    actual: vec![x.len()],
                });
            }
            data.extend_from_slice(x);
            data.extend(time_embedding(tau, self.arch.time_embed_dim));
        }
        Tensor::new(vec![samples.len(), width], data)
    }

    /// Records the forward pass of `input` on `tape`, with `params` being
    /// this model's parameters already placed on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let layers = params.len() / 2;
        let mut h = input;
        for (l, wb) in params.chunks(2).enumerate() {
            h = tape.matmul(h, wb[0])?;
            h = tape.add_row_bias(h, wb[1])?;
            if l + 1 < layers {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass of one sample; does not touch the query counter.
    fn forward_one(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        h.extend(time_embedding(tau, self.arch.time_embed_dim));
        let layers = self.params.len() / 2;
        for (l, wb) in self.params.chunks(2).enumerate() {
            let (w, b) = (&wb[0], &wb[1]);
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let mut out = b.data().to_vec();
            let mut tmp = vec![0.0; n];
            matmul_into(&h, w.data(), &mut tmp, 1, k, n);
            for (o, t) in out.iter_mut().zip(tmp) {
                *o += t;
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = silu(*v));
            }
            h = out;
        }
        h
    }
}

impl NoisePredictor for EpsilonModel {
    fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        if x.len() != self.arch.sample_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.arch.sample_dim],
                actual: x.shape().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("model time {tau} outside [0, 1]")));
        }
        self.queries.tick();
        let out = self.forward_one(x.data(), tau);
        Tensor::from_parts(x.shape().to_vec(), out).check_finite("model forward")
    }

    fn query_count(&self) -> u64 {
        self.queries.get()
    }
}
