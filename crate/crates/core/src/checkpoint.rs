//! Training checkpoints.
//!
//! Layout: `SATCKPT\0`, u32 format version, u64 header length, a compact JSON
//! header, then little-endian f32 payloads (parameters followed by momentum
//! buffers) at the offsets the header lists. All integers are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SatError};
use crate::model::SatModel;
use crate::optim::MomentumState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{EpochStats, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SATCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

/// Enough to put a ChaCha8 generator back at the same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// u128 as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| SatError::Data(format!("rng seed has {} bytes, expected 32", self.seed.len())))?;
        let pos: u128 =
            self.word_pos.parse().map_err(|_| SatError::Data(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    step: usize,
    rng: RngState,
    best_metric: Option<f64>,
    history: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    /// Lowest epoch loss seen so far.
    pub best_metric: Option<f64>,
    pub history: Vec<EpochStats>,
    pub params: ParamStore<f32>,
    pub momentum: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer, best_metric: Option<f64>) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch: trainer.epoch,
            step: trainer.step,
            rng: RngState::capture(&trainer.rng),
            best_metric,
            history: trainer.history.clone(),
            params: trainer.model.params.clone(),
            momentum: trainer.momentum.buffers.clone(),
        }
    }

    pub fn model(&self) -> Result<SatModel<f32>> {
        SatModel::from_params(self.config.resolved_model(), self.params.clone())
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = SatModel::from_params(self.config.resolved_model(), self.params)?;
        let mut trainer = Trainer::new(
            model,
            self.config.optim.clone(),
            self.config.loss,
            self.config.augment.clone(),
            self.config.train_seed(),
        )?;
        trainer.rng = self.rng.restore()?;
        trainer.momentum = MomentumState { buffers: self.momentum };
        trainer.epoch = self.epoch;
        trainer.step = self.step;
        trainer.history = self.history;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.momentum.len() != self.params.len() {
            return Err(SatError::Contract(format!(
                "{} momentum buffers for {} parameters",
                self.momentum.len(),
                self.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(2 * self.params.len());
        let mut offset = 0u64;
        for p in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: TensorGroup::Param,
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 4 * p.value.numel() as u64;
        }
        for (p, buf) in self.params.iter().zip(&self.momentum) {
            if buf.len() != p.value.numel() {
                return Err(SatError::Contract(format!("momentum for {} has {} values", p.name, buf.len())));
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: TensorGroup::Momentum,
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 4 * buf.len() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            best_metric: self.best_metric,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().flat_map(|p| p.value.data()).chain(self.momentum.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| SatError::format(path, msg);
        if bytes.len() < PREFIX_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload_start = (PREFIX_LEN as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?
            as usize;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let payload = &bytes[payload_start..];

        let mut expected = 0u64;
        let mut params = ParamStore::new();
        let mut momentum = Vec::new();
        for t in &header.tensors {
            if t.offset != expected {
                return Err(bad(format!("tensor {} at offset {}, expected {expected}", t.name, t.offset)));
            }
            let numel: usize = t.shape.iter().product();
            let end = expected as usize + 4 * numel;
            let raw = payload
                .get(expected as usize..end)
                .ok_or_else(|| bad(format!("payload truncated inside tensor {}", t.name)))?;
            let values: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            match t.group {
                TensorGroup::Param => {
                    if !momentum.is_empty() {
                        return Err(bad(format!("parameter {} listed after momentum buffers", t.name)));
                    }
                    params.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?)?;
                }
                TensorGroup::Momentum => {
                    let i = momentum.len();
                    let p = params.iter().nth(i).ok_or_else(|| bad(format!("stray momentum buffer {}", t.name)))?;
                    if p.name != t.name || p.value.shape() != t.shape.as_slice() {
                        return Err(bad(format!(
                            "momentum buffer {} does not line up with parameter {}",
                            t.name, p.name
                        )));
                    }
                    momentum.push(values);
                }
            }
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - expected as usize)));
        }
        if momentum.len() != params.len() {
            return Err(bad(format!("{} momentum buffers for {} parameters", momentum.len(), params.len())));
        }
        // Rejects parameter sets that do not fit the stored configuration.
        SatModel::from_params(header.config.resolved_model(), params.clone())?;
        header.rng.restore()?;
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            best_metric: header.best_metric,
            history: header.history,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| SatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SatError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
