//! TXCK checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TXCK"
//! u32 header_len, header JSON (run config, epoch, label scale, RNG state, tensor names and shapes)
//! row-major f32 payload for each tensor, header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::record::Reader;
use crate::data::LabelScale;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{RngState, TrainOutcome};

pub const MAGIC: &[u8; 4] = b"TXCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    scale: LabelScale,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    /// Label scale of the training data.
    pub scale: LabelScale,
    pub rng: RngState,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_outcome(config: &RunConfig, outcome: &TrainOutcome, scale: LabelScale) -> Self {
        Self {
            config: config.clone(),
            epoch: outcome.epoch,
            scale,
            rng: outcome.rng,
            params: outcome.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            scale: self.scale,
            rng: self.rng,
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Contract("checkpoint header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected \"TXCK\"", String::from_utf8_lossy(magic)),
            });
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: at,
            message: format!("bad header: {e}"),
        })?;
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let n = entry.shape.iter().product();
            let at = r.pos;
            let t = Tensor::new(&entry.shape, r.f32s(n)?).map_err(|e| Error::Format {
                offset: at,
                message: format!("tensor `{}`: {e}", entry.name),
            })?;
            params.insert(entry.name.clone(), t)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            scale: header.scale,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(Error::at_path(path))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model from the stored config and fills every parameter by name.
    pub fn restore(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::init::<f32>(&self.config.model, self.config.seed)?;
        if store.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.param(id).name.clone();
            let saved = self
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{name}`")))?;
            let slot = store.get_mut(id);
            if slot.shape() != saved.shape() {
                return Err(Error::shape("checkpoint_restore", slot.shape(), saved.shape()));
            }
            *slot = saved.clone();
        }
        Ok((model, store))
    }
}
