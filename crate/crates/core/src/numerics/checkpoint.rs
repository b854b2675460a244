//! Parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "TSAPCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes {"params": [{"name", "shape"}...], "metadata": {...}}
//! payload  f64 LE    every parameter, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamEntry, ParamStore, Result};

const MAGIC: &[u8; 8] = b"TSAPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    metadata: BTreeMap<String, String>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &ParamStore,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let header = Header {
        params: params.entries().to_vec(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(params.numel() * 8);
    for v in params.flat() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let total: usize = header.params.iter().map(ParamEntry::numel).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != total * 8 {
        return Err(NumericsError::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            total * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Checkpoint {
        params: ParamStore::from_parts(header.params, data)?,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, metadata)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}
