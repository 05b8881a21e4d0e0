//! The declarative experiment document.
//!
//! A config is a TOML table layered as: built-in preset, then an optional
//! file, then `key=value` overrides. Missing keys fall back to the overfit
//! preset and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use pialab_core::adam::AdamConfig;
use pialab_core::attacks::{AttackMethod, MethodKind};
use pialab_core::data::DatasetKind;
use pialab_core::model::ModelArch;
use pialab_core::schedule::{NoiseSchedule, ScheduleSpec};
use pialab_core::train::TrainConfig;
use pialab_core::Time;
use serde::{Deserialize, Serialize};

use crate::CliError;

const OVERFIT: &str = include_str!("../presets/overfit.toml");
const OVERFIT_CONTINUOUS: &str = include_str!("../presets/overfit-continuous.toml");

pub const PRESETS: [&str; 2] = ["overfit", "overfit-continuous"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub attacks: Vec<AttackConfig>,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

/// `fraction` of the dataset is selected and split evenly into members and
/// holdouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Discrete,
    Continuous,
}

/// `steps`, `beta_start`, `beta_end` apply to the discrete schedule and
/// `beta_min`, `beta_max` to the VP-SDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_draws: usize,
    pub lr: f64,
    pub seed: u64,
    pub continuous_t_min: f64,
    /// Wall-clock limit for `train`; exceeding it exits with code 3.
    pub budget_secs: u64,
    /// Continue from the existing checkpoint up to `epochs` total.
    pub resume: bool,
}

/// Integer times are discrete steps, floats are continuous times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimePoint {
    Step(usize),
    Continuous(f64),
}

impl From<TimePoint> for Time {
    fn from(t: TimePoint) -> Time {
        match t {
            TimePoint::Step(s) => Time::Step(s),
            TimePoint::Continuous(c) => Time::Continuous(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: MethodKind,
    pub t: TimePoint,
    pub p: f64,
    pub k_steps: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn method(&self) -> AttackMethod {
        AttackMethod::new(self.method, Time::from(self.t), self.p)
            .with_k_steps(self.k_steps)
            .with_seed(self.seed)
    }
}

/// Grid for `sweep`. Without `t`, the grid runs at intervals of one
/// hundredth of the time range, endpoints excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<MethodKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<TimePoint>>,
    pub p: Vec<f64>,
    pub k_steps: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("pialab-run"),
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            attacks: [
                (MethodKind::NaiveAttack, 2.0),
                (MethodKind::SecMi, 2.0),
                (MethodKind::Pia, 4.0),
                (MethodKind::Pian, 4.0),
            ]
            .into_iter()
            .map(|(method, p)| AttackConfig {
                method,
                p,
                ..AttackConfig::default()
            })
            .collect(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            n: 128,
            dim: 2,
            seed: 0,
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fraction: 1.0, seed: 1 }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Discrete,
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.005,
            beta_min: 0.1,
            beta_max: 0.5,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = ModelArch::standard(2);
        Self {
            hidden: arch.hidden,
            time_embed_dim: arch.time_embed_dim,
            seed: 3,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 64,
            noise_draws: 32,
            lr: 1e-2,
            seed: 2,
            continuous_t_min: 1e-3,
            budget_secs: 600,
            resume: false,
        }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Pia,
            t: TimePoint::Step(20),
            p: 4.0,
            k_steps: 10,
            seed: 0,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodKind::Pia],
            t: None,
            p: vec![4.0],
            k_steps: 10,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn spec(&self) -> ScheduleSpec {
        match self.kind {
            ScheduleKind::Discrete => ScheduleSpec::Linear {
                steps: self.steps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            ScheduleKind::Continuous => ScheduleSpec::VpSde {
                beta_min: self.beta_min,
                beta_max: self.beta_max,
            },
        }
    }
}

impl ExperimentConfig {
    /// A built-in preset by name.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(&preset_table(name)?.to_string())
            .map_err(|e| CliError::Config(format!("preset `{name}`: {e}")))?;
        Ok(cfg)
    }

    /// Layers `preset`, the file at `path` and `overrides` (`a.b=value`,
    /// with TOML values; bare words are strings), then validates.
    pub fn load(
        preset: Option<&str>,
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut doc = preset_table(preset.unwrap_or("overfit"))?;
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let file: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            sample_dim: self.dataset.dim,
            hidden: self.model.hidden.clone(),
            time_embed_dim: self.model.time_embed_dim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            noise_draws: self.training.noise_draws,
            adam: AdamConfig {
                lr: self.training.lr,
                ..AdamConfig::default()
            },
            seed: self.training.seed,
            continuous_t_min: self.training.continuous_t_min,
            start_epoch: 0,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        self.schedule
            .spec()
            .build()
            .map_err(|e| CliError::Config(format!("schedule: {e}")))
    }

    /// Checks every field that can be checked without touching disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.dataset.n < 2 {
            return bad("dataset.n", format!("need at least 2 samples, got {}", self.dataset.n));
        }
        if self.dataset.dim == 0 {
            return bad("dataset.dim", "must be positive".into());
        }
        let f = self.split.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad("split.fraction", format!("must be in (0, 1], got {f}"));
        }
        if ((f * self.dataset.n as f64).floor() as usize) < 2 {
            return bad("split.fraction", format!("selects fewer than 2 of {} samples", self.dataset.n));
        }
        let sched = self.schedule()?;
        if let Err(e) = self.arch().validate() {
            return bad("model", e.to_string());
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return bad("training.batch_size", "must be positive".into());
        }
        if t.noise_draws == 0 {
            return bad("training.noise_draws", "must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("training.lr", format!("must be positive, got {}", t.lr));
        }
        if !(t.continuous_t_min > 0.0 && t.continuous_t_min < 1.0) {
            return bad("training.continuous_t_min", "must be in (0, 1)".into());
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if let Err(e) = a.method().validate(&sched) {
                return bad(&format!("attacks[{i}]"), e.to_string());
            }
        }
        if self.sweep.p.iter().any(|&p| p.is_nan() || p < 1.0) {
            return bad("sweep.p", "every norm order must be >= 1".into());
        }
        Ok(())
    }
}

fn preset_table(name: &str) -> Result<toml::Table, CliError> {
    let parse = |s: &str| s.parse::<toml::Table>().expect("bundled preset parses");
    match name {
        "overfit" => Ok(parse(OVERFIT)),
        "overfit-continuous" => {
            let mut base = parse(OVERFIT);
            merge(&mut base, parse(OVERFIT_CONTINUOUS));
            Ok(base)
        }
        other => Err(CliError::Config(format!(
            "preset: unknown preset `{other}`, expected one of {PRESETS:?}"
        ))),
    }
}

/// Deep-merges tables; any other value in `top` replaces the base value.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<(), CliError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{ov}`: expected key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{ov}`: empty key segment")));
    }
    let mut slot = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for part in &parts[1..] {
        slot = match slot {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| {
                    CliError::Config(format!("{key}: `{part}` is not an array index"))
                })?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| {
                    CliError::Config(format!("{key}: index {i} out of range (length {len})"))
                })?
            }
            _ => return Err(CliError::Config(format!("{key}: `{part}` is not a table"))),
        };
    }
    *slot = value;
    Ok(())
}
