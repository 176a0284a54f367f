//! Checkpoint file layout:
//!
//! ```text
//! u64 LE   manifest length in bytes
//! JSON     manifest: format_version, config, task, step, counters, RNG state,
//!          and an ordered tensor directory (name, shape, offset, length)
//! binary   little-endian f32 payloads; offsets are relative to this section
//! ```
//!
//! Tensor names carry a prefix: `params/`, `ema/`, `adam_m/` or `adam_v/`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelState, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::EmaState;
use crate::io::atomic_write;
use crate::nets::ModelParams;
use crate::oracles::Task;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub task: Task,
    pub state: ModelState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    task: Task,
    step: u64,
    ema_step: u64,
    optimizer_step: u64,
    rng: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn groups(&self) -> [&ModelParams<f32>; 4] {
        let s = &self.state;
        [&s.params, &s.ema.shadow, &s.opt.m, &s.opt.v]
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bytes_with_version(FORMAT_VERSION)
    }

    pub(crate) fn to_bytes_with_version(&self, version: u32) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (prefix, group) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in group.iter() {
                let offset = payload.len() as u64;
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                    length: payload.len() as u64 - offset,
                });
            }
        }
        let manifest = Manifest {
            format_version: version,
            config: self.config.clone(),
            task: self.task.clone(),
            step: self.state.step,
            ema_step: self.state.ema.step,
            optimizer_step: self.state.opt.step,
            rng: self.state.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("file shorter than its header"))?;
        let json_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("manifest length overflows"))?;
        let json = bytes
            .get(8..8usize.saturating_add(json_len))
            .filter(|_| json_len <= bytes.len())
            .ok_or_else(|| corrupt("truncated manifest"))?;
        let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("manifest has no format_version"))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let payload = &bytes[8 + json_len..];

        let projector = manifest.config.align.projector_shape(&manifest.config.model)?;
        let expected = ModelParams::<f32>::expected_shapes(&manifest.config.model, Some(projector));
        let mut groups: [BTreeMap<String, Tensor<f32>>; 4] = Default::default();
        for e in &manifest.tensors {
            let (prefix, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| corrupt(&format!("tensor name {:?} has no group prefix", e.name)))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == prefix)
                .ok_or_else(|| corrupt(&format!("unknown tensor group {prefix:?}")))?;
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count as u64 {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("{}: {} bytes for shape {:?}", e.name, e.length, e.shape),
                ));
            }
            if expected.get(name) != Some(&e.shape) {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("{}: shape {:?} does not match the model config", e.name, e.shape),
                ));
            }
            let start = usize::try_from(e.offset).map_err(|_| corrupt("offset overflows"))?;
            let data = payload
                .get(start..start.saturating_add(e.length as usize))
                .filter(|_| start.checked_add(e.length as usize).is_some())
                .ok_or_else(|| corrupt(&format!("truncated payload for {}", e.name)))?;
            let values = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if groups[gi].insert(name.to_string(), Tensor::new(e.shape.clone(), values)?).is_some() {
                return Err(corrupt(&format!("duplicate tensor {}", e.name)));
            }
        }
        for (g, prefix) in groups.iter().zip(GROUPS) {
            if g.len() != expected.len() {
                return Err(corrupt(&format!("group {prefix} has {} of {} tensors", g.len(), expected.len())));
            }
        }
        let [params, shadow, m, v] = groups.map(ModelParams::from_map);
        let state = ModelState {
            params,
            ema: EmaState {
                shadow,
                decay: manifest.config.ema_decay,
                step: manifest.ema_step,
            },
            opt: OptimizerState {
                m,
                v,
                step: manifest.optimizer_step,
            },
            rng: manifest.rng,
            step: manifest.step,
        };
        Ok(Checkpoint {
            config: manifest.config,
            task: manifest.task,
            state,
        })
    }
}

/// Writes atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{Trainer, TrainConfig};
    use super::*;
    use crate::nets::VelocityNetConfig;
    use crate::objectives::AlignConfig;

    fn trained() -> Checkpoint {
        let cfg = TrainConfig {
            model: VelocityNetConfig {
                depth: 2,
                width: 8,
                time_embed_dim: 4,
                ..VelocityNetConfig::mlp(2, 8)
            },
            align: AlignConfig {
                projector_hidden: 4,
                ..AlignConfig::default()
            },
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, Task::default()).unwrap();
        t.run(3, None).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = trained();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.state.params.bit_eq(&c.state.params));
        assert!(back.state.ema.shadow.bit_eq(&c.state.ema.shadow));
        assert!(back.state.opt.m.bit_eq(&c.state.opt.m) && back.state.opt.v.bit_eq(&c.state.opt.v));
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_and_truncation_errors() {
        let c = trained();
        let bumped = c.to_bytes_with_version(FORMAT_VERSION + 1).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(Error::CheckpointVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
        let bytes = c.to_bytes().unwrap();
        for cut in [0, 5, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let c = trained();
        let bytes = c.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        let edited = json.replacen("\"shape\":[2,8]", "\"shape\":[8,2]", 1);
        assert_ne!(edited, json);
        let mut out = (edited.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::Shape { .. })));
    }
}
