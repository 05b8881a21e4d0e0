//! Synthetic datasets, member/hold-out splits, and their files.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing;
use crate::rng::{self, standard_normal, Stream};
use crate::tensor::Tensor;

const DATA_MAGIC: &[u8; 8] = b"PIADATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    Ring,
    GridImage,
}

impl DatasetKind {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture => "gaussian-mixture",
            DatasetKind::Ring => "ring",
            DatasetKind::GridImage => "grid-image",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            DatasetKind::GaussianMixture,
            DatasetKind::Ring,
            DatasetKind::GridImage,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
        .ok_or_else(|| Error::invalid(format!("unknown dataset kind `{s}`")))
    }
}

/// Standardized samples; sample ids are indices into `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub dim: usize,
    pub seed: u64,
    pub samples: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub const MIXTURE_COMPONENTS: usize = 4;
pub const MIXTURE_STD: f64 = 0.5;
pub const RING_NOISE: f64 = 0.05;

/// Center `j` of the mixture: coordinate `i` is `±1` by bit `i mod 2` of `j`.
pub fn mixture_center(j: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if (j >> (i % 2)) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Samples before standardization.
pub fn gen_raw(kind: DatasetKind, n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::invalid(format!("dataset needs n >= 2, got {n}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dataset dim must be >= 1"));
    }
    let mut r = rng::rng(seed, Stream::Data);
    match kind {
        DatasetKind::GaussianMixture => Ok((0..n)
            .map(|_| {
                let j = r.random_range(0..MIXTURE_COMPONENTS);
                let z = standard_normal(&mut r, dim);
                mixture_center(j, dim)
                    .iter()
                    .zip(z)
                    .map(|(c, z)| c + MIXTURE_STD * z)
                    .collect()
            })
            .collect()),
        DatasetKind::Ring => {
            if dim < 2 {
                return Err(Error::invalid("ring needs dim >= 2"));
            }
            let (u, v) = ring_frame(dim, &mut r);
            Ok((0..n)
                .map(|_| {
                    let theta = r.random_range(0.0..std::f64::consts::TAU);
                    let radius = 1.0 + RING_NOISE * standard_normal(&mut r, 1)[0];
                    let (a, b) = (radius * theta.cos(), radius * theta.sin());
                    u.iter().zip(&v).map(|(ui, vi)| a * ui + b * vi).collect()
                })
                .collect())
        }
        DatasetKind::GridImage => {
            let side = (dim as f64).sqrt().round() as usize;
            if side * side != dim {
                return Err(Error::invalid(format!(
                    "grid-image needs a square dim, got {dim}"
                )));
            }
            Ok((0..n).map(|_| grid_pattern(side, &mut r)).collect())
        }
    }
}

/// Orthonormal pair spanning the ring's plane; the coordinate plane for dim 2.
fn ring_frame(dim: usize, r: &mut rng::Rng) -> (Vec<f64>, Vec<f64>) {
    if dim == 2 {
        return (vec![1.0, 0.0], vec![0.0, 1.0]);
    }
    let normalize = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let u = normalize(standard_normal(r, dim));
    let w = standard_normal(r, dim);
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let v = normalize(w.iter().zip(&u).map(|(wi, ui)| wi - dot * ui).collect());
    (u, v)
}

/// Stripes, checkerboards, or a blob on a `side × side` grid, plus pixel noise.
fn grid_pattern(side: usize, r: &mut rng::Rng) -> Vec<f64> {
    let kind = r.random_range(0..4u8);
    let freq = r.random_range(1..=side.max(2) / 2) as f64;
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = (
        r.random_range(0.0..side as f64),
        r.random_range(0.0..side as f64),
    );
    let s = side as f64;
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64, row as f64);
            let w = std::f64::consts::TAU * freq / s;
            let v = match kind {
                0 => (w * y + phase).sin(),
                1 => (w * x + phase).sin(),
                2 => (w * x + phase).sin() * (w * y + phase).sin(),
                _ => {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    (-d2 / (0.1 * s * s).max(1.0)).exp()
                }
            };
            out.push(v);
        }
    }
    let noise = standard_normal(r, side * side);
    out.iter().zip(noise).map(|(v, z)| v + RING_NOISE * z).collect()
}

/// Per-coordinate empirical standardization (mean 0, 1/n variance 1).
pub fn standardize(raw: &mut [Vec<f64>]) -> Result<()> {
    let n = raw.len() as f64;
    let dim = raw.first().map_or(0, Vec::len);
    for i in 0..dim {
        let mean = raw.iter().map(|s| s[i]).sum::<f64>() / n;
        let var = raw.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::DegenerateInput(format!(
                "coordinate {i} has zero variance"
            )));
        }
        let sd = var.sqrt();
        for s in raw.iter_mut() {
            s[i] = (s[i] - mean) / sd;
        }
    }
    Ok(())
}

pub fn gen_dataset(kind: DatasetKind, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let mut raw = gen_raw(kind, n, dim, seed)?;
    standardize(&mut raw)?;
    Ok(Dataset {
        kind,
        dim,
        seed,
        samples: raw.into_iter().map(Tensor::vector).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub member_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
    pub split_seed: u64,
}

/// Selects `⌊fraction·n⌋` ids by seeded shuffle; the first half (rounded up)
/// become members.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    split_ids(ds.len(), fraction, seed)
}

pub fn split_ids(n: usize, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let m = (fraction * n as f64).floor() as usize;
    if m < 2 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {n} samples selects {m}; need at least 2"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::rng(seed, Stream::Split));
    let n_members = m - m / 2;
    let mut member_ids = ids[..n_members].to_vec();
    let mut holdout_ids = ids[n_members..m].to_vec();
    member_ids.sort_unstable();
    holdout_ids.sort_unstable();
    Ok(Split {
        member_ids,
        holdout_ids,
        split_seed: seed,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: DatasetKind,
    n: usize,
    dim: usize,
    seed: u64,
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let flat: Vec<f64> = ds.samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    let header = DatasetHeader {
        kind: ds.kind,
        n: ds.len(),
        dim: ds.dim,
        seed: ds.seed,
    };
    framing::write(path, DATA_MAGIC, &header, &[&flat])
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (h, blocks): (DatasetHeader, _) = framing::read(path, DATA_MAGIC)?;
    if h.dim == 0 {
        return Err(Error::format(path, "dim", "must be >= 1"));
    }
    let [flat]: [Vec<f64>; 1] = blocks
        .try_into()
        .map_err(|b: Vec<_>| Error::format(path, "samples", format!("expected 1 block, found {}", b.len())))?;
    if Some(flat.len()) != h.n.checked_mul(h.dim) {
        return Err(Error::format(
            path,
            "samples",
            format!("expected {}×{} values, found {}", h.n, h.dim, flat.len()),
        ));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "samples", "non-finite value"));
    }
    Ok(Dataset {
        kind: h.kind,
        dim: h.dim,
        seed: h.seed,
        samples: flat.chunks_exact(h.dim).map(|c| Tensor::vector(c.to_vec())).collect(),
    })
}

pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(split).expect("split serializes");
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: Split =
        serde_json::from_str(&text).map_err(|e| Error::format(path, "split", e.to_string()))?;
    let mut all: Vec<usize> = s.member_ids.iter().chain(&s.holdout_ids).copied().collect();
    all.sort_unstable();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::format(path, "member_ids", "overlaps holdout_ids"));
    }
    Ok(s)
}
