//! Weights file.
//!
//! Layout: the 8-byte magic `EXSGWT01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter array as little-endian `f32` in
//! the order listed under `params` (the network's documented parameter order).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::unet::{UNet, UNetSpec};
use crate::error::{Error, Result};
use crate::volume::mvol::atomic_write;

pub const MAGIC: &[u8; 8] = b"EXSGWT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub spec: UNetSpec,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

pub fn encode_weights(model: &UNet<f32>, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let header = WeightsHeader {
        spec: model.spec.clone(),
        seed,
        epoch,
        params: model
            .param_names()
            .iter()
            .zip(&model.params)
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                len: p.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    out.extend_from_slice(&json);
    for v in model.params.iter().flatten() {
        out.write_f32::<LittleEndian>(*v).expect("vec write");
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(UNet<f32>, WeightsHeader)> {
    let bad = |m: &str| Error::MalformedHeader(format!("weights: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let mut cur = Cursor::new(&bytes[8..]);
    let hlen = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    if hlen > bytes.len() - 16 {
        return Err(bad("header length exceeds file"));
    }
    let mut json = vec![0u8; hlen];
    cur.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: WeightsHeader = serde_json::from_slice(&json)?;
    let total: usize = header.params.iter().map(|p| p.len).sum();
    let payload = bytes.len() - 16 - hlen;
    if payload != 4 * total {
        return Err(Error::SizeMismatch {
            expected: 4 * total,
            found: payload,
        });
    }
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let mut v = vec![0f32; p.len];
        cur.read_f32_into::<LittleEndian>(&mut v).map_err(|_| bad("truncated payload"))?;
        params.push(v);
    }
    let model = UNet::from_params(header.spec.clone(), params)?;
    if model.param_names().iter().zip(&header.params).any(|(a, b)| *a != b.name) {
        return Err(bad("parameter names do not match the spec"));
    }
    Ok((model, header))
}

pub fn save_weights(path: &Path, model: &UNet<f32>, seed: u64, epoch: usize) -> Result<()> {
    atomic_write(path, &encode_weights(model, seed, epoch)?)
}

pub fn load_weights(path: &Path) -> Result<(UNet<f32>, WeightsHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
