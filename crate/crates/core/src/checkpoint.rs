//! Model checkpoints: JSON header plus raw parameter blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing;
use crate::model::{EpsilonModel, ModelArch};
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIALAB01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ModelArch,
    pub schedule: ScheduleSpec,
    pub init_seed: u64,
    pub train_seed: u64,
    pub epochs_trained: usize,
}

impl CheckpointMeta {
    pub fn new(arch: ModelArch, schedule: ScheduleSpec, init_seed: u64, train_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            arch,
            schedule,
            init_seed,
            train_seed,
            epochs_trained: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: EpsilonModel,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.meta.arch != *ckpt.model.arch() {
        return Err(Error::invalid("checkpoint header and model disagree on architecture"));
    }
    let blocks: Vec<&[f64]> = ckpt.model.params().iter().map(Tensor::data).collect();
    framing::write(path, CHECKPOINT_MAGIC, &ckpt.meta, &blocks)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, blocks): (CheckpointMeta, _) = framing::read(path, CHECKPOINT_MAGIC)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            "format_version",
            format!("unsupported version {}", meta.format_version),
        ));
    }
    meta.arch
        .validate()
        .map_err(|e| Error::format(path, "arch", e.to_string()))?;
    let shapes = meta.arch.param_shapes();
    if shapes.len() != blocks.len() {
        return Err(Error::format(
            path,
            "params",
            format!("expected {} tensors, found {}", shapes.len(), blocks.len()),
        ));
    }
    let params = shapes
        .into_iter()
        .zip(blocks)
        .enumerate()
        .map(|(i, (shape, data))| {
            Tensor::new(shape, data)
                .map_err(|e| Error::format(path, format!("params[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = EpsilonModel::from_params(meta.arch.clone(), params)?;
    Ok(Checkpoint { meta, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn sample() -> Checkpoint {
        let arch = ModelArch {
            sample_dim: 2,
            hidden: vec![8, 8],
            time_embed_dim: 4,
        };
        let schedule = ScheduleSpec::Linear {
            steps: 10,
            beta_start: 1e-4,
            beta_end: 0.2,
        };
        Checkpoint {
            meta: CheckpointMeta::new(arch.clone(), schedule, 3, 4),
            model: EpsilonModel::new(arch, 3).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ck = sample();
        save_checkpoint(&ck, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.model.params(), ck.model.params());
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
