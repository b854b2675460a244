//! Precomputed embeddings, persisted as a JSON manifest plus an f64 payload.
//!
//! ```text
//! magic    8 bytes "TSAPEMBD"
//! version  u32 LE
//! hlen     u64 LE
//! header   JSON {freeze_seed, h_dim, tables: [{subject_id, session_id, length_s, starts, channel_ids}]}
//! payload  f64 LE, every table in order, [window][channel][h_dim]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderError, IntervalSpec, Result, TemporalEncoder};
use crate::datagen::Recording;

const MAGIC: &[u8; 8] = b"TSAPEMBD";
const VERSION: u32 = 1;

/// Embeddings of a set of equal-length windows of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub subject_id: u32,
    pub session_id: u32,
    pub length_s: f64,
    pub starts: Vec<f64>,
    pub channel_ids: Vec<u32>,
    #[serde(skip)]
    pub h_dim: usize,
    /// `[window][channel][h_dim]`.
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl EmbeddingTable {
    /// Encodes every `(window, channel)` pair.
    pub fn build(
        encoder: &TemporalEncoder,
        rec: &Recording,
        intervals: &[IntervalSpec],
        channel_ids: &[u32],
    ) -> Result<Self> {
        let length_s = intervals.first().map(|i| i.length_s).unwrap_or(0.0);
        if intervals.iter().any(|i| i.length_s != length_s) {
            return Err(EncoderError::InvalidInterval("mixed lengths in one table".into()));
        }
        let idx: Vec<usize> = channel_ids
            .iter()
            .map(|&id| rec.channel_index(id).ok_or(EncoderError::UnknownChannel(id)))
            .collect::<Result<_>>()?;
        let h = encoder.h_dim();
        let mut data = Vec::with_capacity(intervals.len() * idx.len() * h);
        for iv in intervals {
            for &c in &idx {
                data.extend(encoder.encode_interval(rec, c, iv)?);
            }
        }
        Ok(Self {
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            length_s,
            starts: intervals.iter().map(|i| i.start_s).collect(),
            channel_ids: channel_ids.to_vec(),
            h_dim: h,
            data,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn n_chan(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn get(&self, window: usize, channel: usize) -> &[f64] {
        let off = (window * self.n_chan() + channel) * self.h_dim;
        &self.data[off..off + self.h_dim]
    }

    pub fn window(&self, window: usize) -> &[f64] {
        let w = self.n_chan() * self.h_dim;
        &self.data[window * w..(window + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub freeze_seed: u64,
    pub h_dim: usize,
    pub tables: Vec<EmbeddingTable>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    freeze_seed: u64,
    h_dim: usize,
    tables: Vec<EmbeddingTable>,
}

impl EmbeddingCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            freeze_seed: self.freeze_seed,
            h_dim: self.h_dim,
            tables: self.tables.clone(),
        };
        let header = serde_json::to_vec(&header).expect("cache header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.tables {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| EncoderError::Cache(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut pos = 20 + hlen;
        let mut tables = header.tables;
        for t in &mut tables {
            t.h_dim = header.h_dim;
            let n = t.n_windows() * t.n_chan() * header.h_dim;
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| bad("truncated payload".into()))?;
            t.data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += n * 8;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            freeze_seed: header.freeze_seed,
            h_dim: header.h_dim,
            tables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
