//! Binary checkpoint container.
//!
//! ```text
//! bytes 0..8    magic "SSACKPT\0"
//! bytes 8..12   format version, u32 little endian
//! bytes 12..20  header length N, u64 little endian
//! next N bytes  UTF-8 JSON header (CheckpointHeader)
//! remainder     parameter values, f64 little endian, layout order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, EncoderParams, ParamLayout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSACKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub layout: ParamLayout,
    /// Hash of the training configuration that produced the parameters.
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn new(encoder: &Encoder, params: EncoderParams, config_hash: String, epoch: usize) -> Self {
        Self {
            header: CheckpointHeader {
                encoder: encoder.config().clone(),
                layout: encoder.layout().clone(),
                config_hash,
                epoch,
                num_params: params.len(),
            },
            params,
        }
    }

    /// Rebuilds the encoder and checks the stored layout against it.
    pub fn encoder(&self) -> Result<Encoder> {
        let enc = Encoder::new(self.header.encoder.clone())?;
        if enc.layout() != &self.header.layout {
            return Err(Error::Checkpoint(
                "stored parameter layout does not match the encoder configuration".into(),
            ));
        }
        Ok(enc)
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&checkpoint.header)?;
    let mut bytes = Vec::with_capacity(20 + header.len() + 8 * checkpoint.params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in &checkpoint.params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])?;
    let body = &bytes[body_start..];
    if header.num_params != header.layout.total() {
        return Err(bad(format!(
            "header declares {} parameters but the layout holds {}",
            header.num_params,
            header.layout.total()
        )));
    }
    if body.len() != 8 * header.num_params {
        return Err(bad(format!(
            "expected {} bytes of parameters, found {}",
            8 * header.num_params,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = EncoderParams::new(values, header.layout.clone())?;
    let ckpt = Checkpoint { header, params };
    ckpt.encoder()?;
    Ok(ckpt)
}
