//! Versioned single-file checkpoint container.
//!
//! Layout: `CTLPCKPT` magic, `u32` version, `u64` header length, JSON header,
//! then little-endian `f32` tensor data addressed by the header manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::TensorInfo;
use super::optim::AdamState;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerConfig;
use crate::trace::{DeviceType, InitialEventDistribution};

pub const MAGIC: &[u8; 8] = b"CTLPCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or generate: weights, tokenizer,
/// the initial-event distribution and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tokenizer: TokenizerConfig,
    pub initial: InitialEventDistribution,
    pub device_type: DeviceType,
    pub epoch: usize,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tokenizer: TokenizerConfig,
    initial: InitialEventDistribution,
    device_type: DeviceType,
    epoch: usize,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorInfo>,
}

impl Checkpoint {
    pub fn new(
        model: Model,
        tokenizer: TokenizerConfig,
        initial: InitialEventDistribution,
        device_type: DeviceType,
    ) -> Result<Self> {
        if model.config().d_token != tokenizer.d_token() {
            return Err(Error::Config(format!(
                "model d_token {} does not match tokenizer d_token {} ({})",
                model.config().d_token,
                tokenizer.d_token(),
                tokenizer.generation
            )));
        }
        Ok(Checkpoint {
            model,
            tokenizer,
            initial,
            device_type,
            epoch: 0,
            optimizer: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn manifest(&self) -> Vec<TensorInfo> {
        let mut t = self.model.layout().tensors.clone();
        let n = self.model.param_count();
        if self.optimizer.is_some() {
            for (i, name) in ["optimizer.m", "optimizer.v"].into_iter().enumerate() {
                t.push(TensorInfo {
                    name: name.into(),
                    shape: vec![n],
                    offset: n * (i + 1),
                });
            }
        }
        t
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            model: self.model.config().clone(),
            tokenizer: self.tokenizer,
            initial: self.initial.clone(),
            device_type: self.device_type,
            epoch: self.epoch,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: self.manifest(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        let mut bufs = vec![self.model.params()];
        if let Some(o) = &self.optimizer {
            bufs.push(&o.m);
            bufs.push(&o.v);
        }
        for buf in bufs {
            let bytes: Vec<u8> = buf.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.write_all(&bytes).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8).map_err(io)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if hlen > 1 << 30 {
            return Err(Error::Checkpoint(format!("header length {hlen} is implausible")));
        }
        let mut json = vec![0u8; hlen];
        input.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.model.validate()?;
        let initial = InitialEventDistribution::new(header.initial.iter().collect())?;

        let layout = super::Layout::new(&header.model);
        let n = layout.total;
        let expect_opt = header.optimizer_step.is_some();
        let (model_t, extra) = header.tensors.split_at(layout.tensors.len().min(header.tensors.len()));
        if model_t != layout.tensors.as_slice() {
            return Err(Error::Checkpoint("tensor manifest does not match the model config".into()));
        }
        let want_extra = if expect_opt { 2 } else { 0 };
        if extra.len() != want_extra || extra.iter().any(|t| t.len() != n) {
            return Err(Error::Checkpoint("optimizer manifest is inconsistent".into()));
        }

        let mut read_buf = |len: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; len * 4];
            input.read_exact(&mut bytes).map_err(io)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let params = read_buf(n)?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: read_buf(n)?,
                v: read_buf(n)?,
            }),
            None => None,
        };
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        let mut ckpt = Checkpoint::new(Model::from_params(header.model, params)?, header.tokenizer, initial, header.device_type)?;
        ckpt.epoch = header.epoch;
        ckpt.optimizer = optimizer;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
