//! Checkpoint files.
//!
//! Layout: the 8-byte magic `SCDMCKPT`, a little-endian `u32` header length,
//! a JSON header, then little-endian `f32` payloads in manifest order. The
//! header records the format version, conditioning mode, full configuration,
//! training step, optional optimizer hyperparameters, a manifest of
//! `name -> shape, offset` and the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConditioningMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{OptimizerKind, OptimizerState, ParamStore};

pub const MAGIC: &[u8; 8] = b"SCDMCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "optimizer.first_moment.";
const SECOND_MOMENT: &str = "optimizer.second_moment.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    mode: ConditioningMode,
    config: TrainConfig,
    step: u64,
    optimizer: Option<OptimizerMeta>,
    manifest: Vec<ManifestEntry>,
    payload_sha256: String,
}

/// Named `f32` arrays plus metadata, in canonical (registration) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: ConditioningMode,
    pub config: TrainConfig,
    pub step: u64,
    pub optimizer: Option<OptimizerMeta>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Captures a model (and optionally its optimizer) at `step`.
    pub fn capture(model: &Model, config: &TrainConfig, step: u64, optimizer: Option<&OptimizerState>) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()))
            .collect();
        let meta = optimizer.map(|o| {
            for (prefix, slots) in [(FIRST_MOMENT, &o.first_moment), (SECOND_MOMENT, &o.second_moment)] {
                for ((name, _), slot) in model.params.iter().zip(slots) {
                    if !slot.is_empty() {
                        arrays.push((
                            format!("{prefix}{name}"),
                            vec![slot.len()],
                            slot.iter().map(|&v| v as f32).collect(),
                        ));
                    }
                }
            }
            OptimizerMeta { kind: o.kind, lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, step: o.step }
        });
        Checkpoint { mode: model.config.mode, config, step, optimizer: meta, arrays }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for (name, shape, data) in &self.arrays {
            manifest.push(ManifestEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mode: self.mode,
            config: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer.clone(),
            manifest,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Load("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let load = |m: &str| Error::Load(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(load("not a checkpoint (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(load("truncated checkpoint header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Load(format!("corrupt checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {}", header.format_version)));
        }
        let payload = &body[len..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(load("checkpoint payload does not match its checksum"));
        }
        let values: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let mut expected = 0;
        let mut arrays = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(Error::Load(format!("manifest entry {} does not fit the payload", e.name)));
            }
            arrays.push((e.name.clone(), e.shape.clone(), values[e.offset..e.offset + n].to_vec()));
            expected += n;
        }
        if expected * 4 != payload.len() {
            return Err(load("payload length disagrees with the manifest"));
        }
        Ok(Checkpoint {
            mode: header.mode,
            config: header.config,
            step: header.step,
            optimizer: header.optimizer,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn copy_params(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = 0;
        for (name, shape, data) in &self.arrays {
            if name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT) {
                continue;
            }
            store.set_data(name, shape, data.iter().map(|&v| v as f64).collect())?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Load(format!("checkpoint holds {seen} of {} parameters", store.len())));
        }
        Ok(())
    }

    /// Loads parameters into an existing model, refusing a mode mismatch.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if model.config.mode != self.mode {
            return Err(Error::Load(format!(
                "checkpoint was trained in {} mode, model is configured as {}",
                self.mode, model.config.mode
            )));
        }
        if model.config != self.config.model {
            return Err(Error::Load("checkpoint configuration differs from the model's".into()));
        }
        self.copy_params(&mut model.params)
    }

    /// Builds the model described by the checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        if self.config.model.mode != self.mode {
            return Err(Error::Load("checkpoint mode disagrees with its configuration".into()));
        }
        let mut model = Model::new(self.config.model.clone(), 0).map_err(|e| Error::Load(e.to_string()))?;
        self.copy_params(&mut model.params)?;
        Ok(model)
    }

    /// Rebuilds the optimizer state for `model`, if one was saved.
    pub fn to_optimizer(&self, model: &Model) -> Result<Option<OptimizerState>> {
        let Some(meta) = &self.optimizer else { return Ok(None) };
        let mut state = OptimizerState::new(meta.kind, meta.lr, &model.params);
        (state.beta1, state.beta2, state.eps, state.step) = (meta.beta1, meta.beta2, meta.eps, meta.step);
        for (prefix, slots) in [(FIRST_MOMENT, &mut state.first_moment), (SECOND_MOMENT, &mut state.second_moment)] {
            for ((name, _), slot) in model.params.iter().zip(slots.iter_mut()) {
                if slot.is_empty() {
                    continue;
                }
                let key = format!("{prefix}{name}");
                let (_, _, data) = self
                    .arrays
                    .iter()
                    .find(|(n, _, _)| *n == key)
                    .ok_or_else(|| Error::Load(format!("missing optimizer slot {key}")))?;
                if data.len() != slot.len() {
                    return Err(Error::Load(format!("optimizer slot {key} has the wrong length")));
                }
                *slot = data.iter().map(|&v| v as f64).collect();
            }
        }
        Ok(Some(state))
    }
}
