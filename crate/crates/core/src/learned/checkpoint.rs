//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header
//! (architecture plus tensor table), then every parameter as a little-endian
//! f64 in layout order. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Arch, Denoiser, TensorSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ANCHRLAB";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Arch,
    tensors: Vec<TensorSpec>,
}

pub fn write_checkpoint<W: Write>(model: &Denoiser, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch().clone(),
        tensors: model.layout().to_vec(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(model.params().len() * 8);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Denoiser> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Checkpoint("truncated version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.tensors != header.arch.layout() {
        return Err(Error::Checkpoint("tensor table does not match architecture".into()));
    }
    let total: usize = header.tensors.iter().map(TensorSpec::len).sum();
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            total * 8,
            data.len()
        )));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Denoiser::from_parts(header.arch, params)
}

pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    read_checkpoint(fs::File::open(path)?)
}
