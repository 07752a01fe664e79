//! Binary checkpoint format.
//!
//! ```text
//! "DRCN" | version: u32 LE (= 1) | header_len: u32 LE | header: UTF-8 JSON
//!        | f32 LE payload: embed1.W embed1.b embed2.W embed2.b recursive.W
//!          recursive.b recon1.W recon1.b recon2.W recon2.b ensemble
//! ```
//!
//! Weight tensors are stored in (out_channel, in_channel, row, column) order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DrcnParams, ModelConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"DRCN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub recursions: usize,
    pub filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub scale: u32,
}

impl CheckpointHeader {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            recursions: self.recursions,
            filters: self.filters,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: DrcnParams<f32>,
}

impl Checkpoint {
    pub fn new(params: DrcnParams<f32>, scale: u32) -> Self {
        let c = params.config();
        Checkpoint {
            header: CheckpointHeader {
                recursions: c.recursions,
                filters: c.filters,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                scale,
            },
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for buf in self.params.buffers() {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(Error::Checkpoint(format!("truncated while reading {what}")));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let config = header.model_config();
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut params = DrcnParams::<f32>::zeros(&config)?;
        for buf in params.buffers_mut() {
            let raw = take(4 * buf.len(), "parameters")?;
            for (v, chunk) in buf.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                rest.len()
            )));
        }
        Ok(Checkpoint { header, params })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
