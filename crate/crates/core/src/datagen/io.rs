//! On-disk corpus: one binary file per session plus a plain-text manifest.
//!
//! Session file layout:
//!
//! ```text
//! magic     8 bytes  "TSAPSESS"
//! version   u32 LE
//! hlen      u64 LE
//! header    JSON {subject_id, session_id, sample_rate_hz, n_samples, channels}
//! payload   f64 LE, n_chan * n_samples, channel-major
//! n_tasks   u32 LE
//! per task: name_len u32 LE, name bytes, n_events u32 LE, f64 LE onset times
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelGeometry, DataError, Recording, Result};

const MAGIC: &[u8; 8] = b"TSAPSESS";
const VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "corpus.manifest";

#[derive(Serialize, Deserialize)]
struct Header {
    subject_id: u32,
    session_id: u32,
    sample_rate_hz: u32,
    n_samples: usize,
    channels: Vec<ChannelGeometry>,
}

fn session_file_name(subject_id: u32, session_id: u32) -> String {
    format!("sub{subject_id:03}_ses{session_id:02}.bin")
}

pub fn write_session<W: Write>(mut w: W, rec: &Recording) -> Result<()> {
    let header = Header {
        subject_id: rec.subject_id,
        session_id: rec.session_id,
        sample_rate_hz: rec.sample_rate_hz,
        n_samples: rec.n_samples,
        channels: rec.channels.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(32 + header.len() + rec.signal.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &rec.signal {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(rec.events.len() as u32).to_le_bytes());
    for (task, times) in &rec.events {
        buf.extend_from_slice(&(task.len() as u32).to_le_bytes());
        buf.extend_from_slice(task.as_bytes());
        buf.extend_from_slice(&(times.len() as u32).to_le_bytes());
        for t in times {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Format {
                path: self.path.to_string(),
                reason: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_session<R: Read>(mut r: R, path: &str) -> Result<Recording> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let fmt = |reason: String| DataError::Format {
        path: path.to_string(),
        reason,
    };
    let mut c = Cursor {
        buf: &bytes,
        pos: 0,
        path,
    };
    if c.take(8)? != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let hlen = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| fmt(e.to_string()))?;
    let signal = c.f64s(header.channels.len() * header.n_samples)?;
    let n_tasks = c.u32()?;
    let mut events = BTreeMap::new();
    for _ in 0..n_tasks {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| fmt(e.to_string()))?;
        let n = c.u32()? as usize;
        events.insert(name, c.f64s(n)?);
    }
    if c.pos != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    let rec = Recording {
        subject_id: header.subject_id,
        session_id: header.session_id,
        sample_rate_hz: header.sample_rate_hz,
        n_samples: header.n_samples,
        signal,
        channels: header.channels,
        events,
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes every session plus the manifest; returns the session file paths.
pub fn write_corpus(dir: &Path, corpus: &[Recording]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("# subject session file\n");
    let mut paths = Vec::with_capacity(corpus.len());
    for rec in corpus {
        let name = session_file_name(rec.subject_id, rec.session_id);
        let path = dir.join(&name);
        let mut buf = Vec::new();
        write_session(&mut buf, rec)?;
        fs::write(&path, buf)?;
        manifest.push_str(&format!("{} {} {}\n", rec.subject_id, rec.session_id, name));
        paths.push(path);
    }
    let mut f = fs::File::create(dir.join(MANIFEST_NAME))?;
    f.write_all(manifest.as_bytes())?;
    Ok(paths)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Recording>> {
    let source = CorpusDir::open(dir)?;
    source
        .session_keys()
        .into_iter()
        .map(|(s, e)| source.load(s, e))
        .collect()
}

/// Anything that can produce recordings in the shared shape.
///
/// A loader for real recordings would implement this trait; the pipeline
/// only depends on it through [`Recording`].
pub trait RecordingSource {
    fn session_keys(&self) -> Vec<(u32, u32)>;
    fn load(&self, subject_id: u32, session_id: u32) -> Result<Recording>;
}

/// A corpus directory written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusDir {
    dir: PathBuf,
    entries: Vec<(u32, u32, String)>,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || DataError::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected `subject session file`", lineno + 1),
            };
            let mut parts = line.split_whitespace();
            let subject = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let session = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let file = parts.next().ok_or_else(bad)?.to_string();
            entries.push((subject, session, file));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }
}

impl RecordingSource for CorpusDir {
    fn session_keys(&self) -> Vec<(u32, u32)> {
        self.entries.iter().map(|(s, e, _)| (*s, *e)).collect()
    }

    fn load(&self, subject_id: u32, session_id: u32) -> Result<Recording> {
        let (_, _, file) = self
            .entries
            .iter()
            .find(|(s, e, _)| *s == subject_id && *e == session_id)
            .ok_or_else(|| DataError::Format {
                path: self.dir.display().to_string(),
                reason: format!("no session {subject_id}/{session_id} in manifest"),
            })?;
        let path = self.dir.join(file);
        read_session(fs::File::open(&path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusConfig};

    #[test]
    fn corpus_round_trip() {
        let cfg = CorpusConfig {
            n_subjects: 1,
            n_channels: 3,
            duration_s: 20.0,
            sample_rate_hz: 64,
            rhythms: Vec::new(),
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, 4).unwrap();
        let dir = std::env::temp_dir().join(format!("tsap-corpus-io-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let paths = write_corpus(&dir, &corpus).unwrap();
        assert_eq!(paths.len(), 2);
        let back = read_corpus(&dir).unwrap();
        assert_eq!(back, corpus);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = CorpusConfig {
            n_subjects: 1,
            sessions_per_subject: 1,
            n_channels: 2,
            duration_s: 10.0,
            sample_rate_hz: 32,
            rhythms: Vec::new(),
            ..CorpusConfig::default()
        };
        let rec = generate_corpus(&cfg, 1).unwrap().remove(0);
        let mut buf = Vec::new();
        write_session(&mut buf, &rec).unwrap();
        buf.pop();
        assert!(matches!(read_session(buf.as_slice(), "x"), Err(DataError::Format { .. })));
    }
}
