//! Decoder checkpoint: `IMPTCKPT` magic, little-endian u64 header length, a
//! JSON header, then every parameter as a little-endian f64 (per layer:
//! weights row-major, then biases).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderDims, DecoderParams, ACTIVATION, LAYER_COUNT};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub latent: usize,
    pub hidden: usize,
    pub layers: usize,
    pub activation: String,
    pub seed: u64,
    pub n_values: usize,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &DecoderParams, seed: u64) -> Result<()> {
    params.validate()?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        latent: params.dims.latent,
        hidden: params.dims.hidden,
        layers: LAYER_COUNT,
        activation: ACTIVATION.to_string(),
        seed,
        n_values: params.num_values(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(params.num_values() * 8);
    for v in params.iter_values() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(DecoderParams, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a decoder checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("checkpoint header too large ({len} bytes)")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    if header.layers != LAYER_COUNT || header.activation != ACTIVATION {
        return Err(Error::Format(format!(
            "unsupported architecture: {} layers, activation {}",
            header.layers, header.activation
        )));
    }
    let dims = DecoderDims {
        latent: header.latent,
        hidden: header.hidden,
    };
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() != header.n_values * 8 {
        return Err(Error::Format(format!(
            "weight blob holds {} bytes, header declares {} values",
            blob.len(),
            header.n_values
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = DecoderParams::from_flat(dims, &values)?;
    params.validate()?;
    Ok((params, header))
}

pub fn save_checkpoint(path: &Path, params: &DecoderParams, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, seed)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DecoderParams, CheckpointHeader)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
