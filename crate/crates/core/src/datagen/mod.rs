//! Synthetic multichannel recordings with event-locked responses.
//!
//! Each subject has a fixed electrode geometry and a response "source" in the
//! unit cube. Sessions are colored background noise with a per-subject
//! spectral tilt plus, at every word onset, a damped oscillation whose
//! amplitude falls off with electrode distance from the source. Sentence
//! onsets (a subset of word onsets) add a slower envelope on top.

mod corpus;
mod io;
mod windows;

pub use corpus::{generate_corpus, generate_session, CorpusConfig, ResponseConfig, RhythmConfig};
pub use io::{read_corpus, read_session, write_corpus, write_session, CorpusDir, RecordingSource, MANIFEST_NAME};
pub use windows::{
    extract_labeled_windows, extract_labeled_windows_in, label_for_center, select_channel_subset,
    LabeledWindow, NEGATIVE_STRIDE_S,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WORD_ONSET: &str = "word_onset";
pub const SENTENCE_ONSET: &str = "sentence_onset";
pub const TASKS: [&str; 2] = [WORD_ONSET, SENTENCE_ONSET];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("recording has zero channels")]
    ZeroChannels,
    #[error("session duration {duration_s} s is shorter than the required {required_s} s")]
    DurationTooShort { duration_s: f64, required_s: f64 },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("interval length {length_s} s does not fit a {duration_s} s recording")]
    InvalidLength { length_s: f64, duration_s: f64 },
    #[error("no valid negative window centers for task {task} at {length_s} s")]
    NoNegatives { task: String, length_s: f64 },
    #[error("channel count {k} out of range 1..={n_chan}")]
    SubsetOutOfRange { k: usize, n_chan: usize },
    #[error("malformed corpus file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    pub channel_id: u32,
    /// Normalized position in `[-1, 1]^3`.
    pub coords: [f64; 3],
}

/// One session of one subject: `[n_chan, n_samples]` signal plus annotations.
///
/// Real recordings would be loaded into the same shape through
/// [`RecordingSource`]; the synthetic generator is the only producer here.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: u32,
    pub session_id: u32,
    pub sample_rate_hz: u32,
    pub n_samples: usize,
    /// Row-major, one row per channel.
    pub signal: Vec<f64>,
    pub channels: Vec<ChannelGeometry>,
    /// Task name to sorted onset times in seconds.
    pub events: BTreeMap<String, Vec<f64>>,
}

impl Recording {
    pub fn n_chan(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz as f64
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.signal[index * self.n_samples..(index + 1) * self.n_samples]
    }

    pub fn channel_index(&self, channel_id: u32) -> Option<usize> {
        self.channels.iter().position(|c| c.channel_id == channel_id)
    }

    pub fn events(&self, task: &str) -> Result<&[f64]> {
        self.events
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::UnknownTask(task.to_string()))
    }

    /// First sample and sample count of a window in this recording.
    pub fn sample_range(&self, start_s: f64, length_s: f64) -> (usize, usize) {
        let sr = self.sample_rate_hz as f64;
        ((start_s * sr).round() as usize, (length_s * sr).round() as usize)
    }

    /// Signal of one channel over `[start_s, start_s + length_s)`.
    pub fn segment(&self, channel_index: usize, start_s: f64, length_s: f64) -> Option<&[f64]> {
        let (lo, n) = self.sample_range(start_s, length_s);
        (start_s >= 0.0 && lo + n <= self.n_samples).then(|| &self.channel(channel_index)[lo..lo + n])
    }

    /// Checks the structural invariants of a recording.
    pub fn validate(&self) -> Result<()> {
        let fmt = |reason: String| DataError::Format {
            path: format!("subject {} session {}", self.subject_id, self.session_id),
            reason,
        };
        if self.channels.is_empty() {
            return Err(DataError::ZeroChannels);
        }
        if self.signal.len() != self.n_chan() * self.n_samples {
            return Err(fmt("signal size does not match channels x samples".into()));
        }
        let mut ids: Vec<u32> = self.channels.iter().map(|c| c.channel_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.channels.len() {
            return Err(fmt("duplicate channel ids".into()));
        }
        if self
            .channels
            .iter()
            .any(|c| c.coords.iter().any(|x| !x.is_finite() || x.abs() > 1.0))
        {
            return Err(fmt("channel coords outside the unit cube".into()));
        }
        if self.signal.iter().any(|v| !v.is_finite()) {
            return Err(fmt("non-finite signal value".into()));
        }
        let dur = self.duration_s();
        for (task, times) in &self.events {
            if times.windows(2).any(|w| w[0] >= w[1]) || times.iter().any(|&t| !(0.0..=dur).contains(&t)) {
                return Err(fmt(format!("events for {task} not strictly increasing inside the recording")));
            }
        }
        if let (Some(words), Some(sentences)) = (self.events.get(WORD_ONSET), self.events.get(SENTENCE_ONSET)) {
            if sentences.iter().any(|s| words.binary_search_by(|w| w.total_cmp(s)).is_err()) {
                return Err(fmt("sentence onsets must be word onsets".into()));
            }
        }
        Ok(())
    }

    /// Sample standard deviation of each channel.
    pub fn channel_std(&self) -> Vec<f64> {
        (0..self.n_chan())
            .map(|c| {
                let x = self.channel(c);
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64).sqrt()
            })
            .collect()
    }
}
