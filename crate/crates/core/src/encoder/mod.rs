//! Frozen per-channel temporal encoder.
//!
//! A single-channel interval is z-normalized, summarized by log band powers
//! over octaves of DFT bin index (optionally also absolute bands in Hz) and
//! a few shape statistics, then mapped to `h_dim` by a fixed random
//! projection.
//! Nothing here is trainable; the projection is a pure function of
//! `freeze_seed`.
//!
//! Because every feature is computed over the whole segment, the same stretch
//! of signal is represented differently depending on how long the window
//! around it is.

mod cache;

pub use cache::{EmbeddingCache, EmbeddingTable};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Recording;
use crate::seed;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("segment has {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("segment has {got} samples, interval implies {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("sample rate {got} Hz does not match encoder rate {expected} Hz")]
    SampleRate { got: u32, expected: u32 },
    #[error("interval [{start_s}, {start_s} + {length_s}) outside the recording")]
    OutOfRange { start_s: f64, length_s: f64 },
    #[error("invalid interval: {0}")]
    InvalidInterval(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("unknown channel {0}")]
    UnknownChannel(u32),
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub const MIN_SEGMENT_SAMPLES: usize = 8;

/// A window of signal: `[start_s, start_s + length_s)`, followed by `gap_s`
/// before the next window when windows are tiled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSpec {
    pub start_s: f64,
    pub length_s: f64,
    pub gap_s: f64,
}

impl IntervalSpec {
    pub fn new(start_s: f64, length_s: f64, gap_s: f64) -> Self {
        Self {
            start_s,
            length_s,
            gap_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_s > 0.0) || !(self.start_s >= 0.0) || !(self.gap_s >= 0.0) {
            return Err(EncoderError::InvalidInterval(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.length_s
    }

    pub fn center_s(&self) -> f64 {
        self.start_s + self.length_s / 2.0
    }

    /// Start of the next window in a gap-separated tiling.
    pub fn next_start_s(&self) -> f64 {
        self.end_s() + self.gap_s
    }
}

/// Windows of `length_s` tiled over `[from_s, to_s)` with `gap_s` between them.
pub fn tile_intervals(from_s: f64, to_s: f64, length_s: f64, gap_s: f64) -> Vec<IntervalSpec> {
    let mut out = Vec::new();
    let mut iv = IntervalSpec::new(from_s.max(0.0), length_s, gap_s);
    while iv.end_s() <= to_s + 1e-9 {
        out.push(iv);
        iv = IntervalSpec::new(iv.next_start_s(), length_s, gap_s);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub sample_rate_hz: u32,
    pub h_dim: usize,
    pub freeze_seed: u64,
    /// Absolute frequency bands, `[lo, hi)` in Hz. Off by default: they read
    /// the same at every window length and let one model serve all lengths.
    pub bands_hz: Vec<(f64, f64)>,
    /// Number of window-relative octaves of DFT bin index. Octave `g` covers
    /// bins `[2^g, 2^(g+1))`, i.e. `2^g / length_s` Hz upward.
    pub relative_octaves: usize,
    /// Each relative octave is split into this many log-spaced groups.
    pub relative_bands_per_octave: usize,
    /// Include the length-free waveform statistics (line length, kurtosis,
    /// peak, Hjorth mobility and complexity, energy entropy). Sign-change
    /// counts and spectral entropy are always included.
    pub waveform_stats: bool,
    /// Features are clipped to `[-feature_clip, feature_clip]` before projection.
    pub feature_clip: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 256,
            h_dim: 64,
            freeze_seed: 0x00F0_CA11,
            bands_hz: Vec::new(),
            relative_octaves: 8,
            relative_bands_per_octave: 1,
            waveform_stats: false,
            feature_clip: 16.0,
        }
    }
}

const DIFF_ORDERS: usize = 5;
const COUNT_UNIT: f64 = 100.0;
const N_WAVEFORM_STATS: usize = 6;
const N_SHAPE_STATS: usize = N_WAVEFORM_STATS + DIFF_ORDERS;
const LOG_FLOOR: f64 = 1e-6;

impl EncoderConfig {
    pub fn n_features(&self) -> usize {
        let waveform = if self.waveform_stats { N_WAVEFORM_STATS } else { 0 };
        self.bands_hz.len() + self.relative_octaves * self.relative_bands_per_octave + waveform + DIFF_ORDERS + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_dim == 0 {
            return Err(EncoderError::InvalidConfig("h_dim must be positive".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(EncoderError::InvalidConfig("sample_rate_hz must be positive".into()));
        }
        if self.bands_hz.iter().any(|(lo, hi)| !(lo >= &0.0 && hi > lo)) {
            return Err(EncoderError::InvalidConfig("bands must satisfy 0 <= lo < hi".into()));
        }
        if self.relative_bands_per_octave == 0 {
            return Err(EncoderError::InvalidConfig("relative_bands_per_octave must be positive".into()));
        }
        if self.relative_octaves > 32 {
            return Err(EncoderError::InvalidConfig("relative_octaves must be at most 32".into()));
        }
        if !(self.feature_clip > 0.0) {
            return Err(EncoderError::InvalidConfig("feature_clip must be positive".into()));
        }
        Ok(())
    }
}

/// The frozen encoder. Cheap to share across threads.
pub struct TemporalEncoder {
    config: EncoderConfig,
    /// `[h_dim, n_features]`, row-major.
    projection: Vec<f64>,
    plans: Mutex<HashMap<usize, Arc<dyn Fft<f64>>>>,
}

impl TemporalEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let f = config.n_features();
        let mut rng = seed::derived_rng(config.freeze_seed, &[seed::tag("encoder-projection")]);
        let scale = 1.0 / (f as f64).sqrt();
        let projection = (0..config.h_dim * f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Ok(Self {
            config,
            projection,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn h_dim(&self) -> usize {
        self.config.h_dim
    }

    /// Upper bound on the output norm for any input: `‖W‖_F · clip · sqrt(F)`.
    pub fn norm_bound(&self) -> f64 {
        let frob = self.projection.iter().map(|w| w * w).sum::<f64>().sqrt();
        frob * self.config.feature_clip * (self.config.n_features() as f64).sqrt()
    }

    fn plan(&self, n: usize) -> Arc<dyn Fft<f64>> {
        let mut plans = self.plans.lock().expect("fft plan cache poisoned");
        plans
            .entry(n)
            .or_insert_with(|| FftPlanner::new().plan_fft_forward(n))
            .clone()
    }

    /// Encodes a raw single-channel segment.
    pub fn encode(&self, segment: &[f64], sample_rate_hz: u32) -> Result<Vec<f64>> {
        if sample_rate_hz != self.config.sample_rate_hz {
            return Err(EncoderError::SampleRate {
                got: sample_rate_hz,
                expected: self.config.sample_rate_hz,
            });
        }
        if segment.len() < MIN_SEGMENT_SAMPLES {
            return Err(EncoderError::TooShort {
                got: segment.len(),
                min: MIN_SEGMENT_SAMPLES,
            });
        }
        let features = self.features(segment);
        let f = features.len();
        Ok(self
            .projection
            .chunks(f)
            .map(|row| row.iter().zip(&features).map(|(w, x)| w * x).sum())
            .collect())
    }

    /// Encodes one channel of a recording over `interval`.
    pub fn encode_interval(&self, rec: &Recording, channel_index: usize, interval: &IntervalSpec) -> Result<Vec<f64>> {
        interval.validate()?;
        let segment = rec
            .segment(channel_index, interval.start_s, interval.length_s)
            .ok_or(EncoderError::OutOfRange {
                start_s: interval.start_s,
                length_s: interval.length_s,
            })?;
        let expected = (interval.length_s * rec.sample_rate_hz as f64).round() as usize;
        if segment.len() != expected {
            return Err(EncoderError::LengthMismatch {
                got: segment.len(),
                expected,
            });
        }
        self.encode(segment, rec.sample_rate_hz)
    }

    /// Clipped feature vector before projection.
    pub fn features(&self, segment: &[f64]) -> Vec<f64> {
        let n = segment.len();
        let nf = n as f64;
        let mean = segment.iter().sum::<f64>() / nf;
        let sd = (segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).sqrt();
        let z: Vec<f64> = if sd > 1e-12 {
            segment.iter().map(|v| (v - mean) / sd).collect()
        } else {
            vec![0.0; n]
        };

        let mut spec: Vec<Complex<f64>> = z.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.plan(n).process(&mut spec);
        let half = n / 2;
        let power: Vec<f64> = spec[..=half].iter().map(|c| c.norm_sqr() / nf).collect();
        let total: f64 = power[1..].iter().sum();
        let frac = |p: f64| if total > 0.0 { p / total } else { 0.0 };
        let sr = self.config.sample_rate_hz as f64;

        let length_s = nf / sr;
        let mut out = Vec::with_capacity(self.config.n_features());
        let band_power: Vec<f64> = self
            .config
            .bands_hz
            .iter()
            .map(|&(lo, hi)| {
                (1..=half)
                    .filter(|&k| {
                        let f = k as f64 * sr / nf;
                        f >= lo && f < hi
                    })
                    .map(|k| power[k])
                    .sum()
            })
            .collect();
        // Relative to the whole filter bank, so drift below the lowest band
        // does not move every band at once; scaled to energy per segment.
        let bank: f64 = band_power.iter().sum();
        for p in &band_power {
            let rel = if bank > 0.0 { p / bank } else { 0.0 };
            out.push((rel * length_s + LOG_FLOOR).log10());
        }
        // Octaves of bin index rather than of frequency: the same band lands in
        // a different octave at every window length.
        let per = self.config.relative_bands_per_octave;
        let edge = |g: usize| (2f64.powf(g as f64 / per as f64) - 1e-9).ceil() as usize;
        for g in 0..self.config.relative_octaves * per {
            let lo = edge(g).min(half + 1);
            let hi = edge(g + 1).min(half + 1);
            let p: f64 = power[lo..hi].iter().sum();
            out.push((frac(p) * length_s + LOG_FLOOR).log10());
        }
        let shape = shape_stats(&z);
        let skip = if self.config.waveform_stats { 0 } else { N_WAVEFORM_STATS };
        out.extend(&shape[skip..]);
        // Spectral entropy in bits, unnormalized, so it grows with the number of bins.
        out.push(if total > 0.0 {
            -power[1..]
                .iter()
                .map(|&p| p / total)
                .filter(|&q| q > 0.0)
                .map(|q| q * q.log2())
                .sum::<f64>()
        } else {
            0.0
        });
        let clip = self.config.feature_clip;
        out.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
        out
    }
}

impl std::fmt::Debug for TemporalEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemporalEncoder").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Shape statistics of a z-normalized segment. All zero for a flat segment.
fn shape_stats(z: &[f64]) -> [f64; N_SHAPE_STATS] {
    let n = z.len() as f64;
    let var = z.iter().map(|v| v * v).sum::<f64>() / n;
    if var == 0.0 {
        return [0.0; N_SHAPE_STATS];
    }
    let diffs: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
    let dn = diffs.len() as f64;
    let line_length = diffs.iter().map(|d| d.abs()).sum::<f64>() / dn;
    let m4 = z.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    let max_abs = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let d_var = diffs.iter().map(|d| d * d).sum::<f64>() / dn;
    let mobility = (d_var / var).sqrt();
    let dd_var = diffs.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (dn - 1.0).max(1.0);
    let complexity = if d_var > 0.0 {
        (dd_var / d_var).sqrt() / mobility.max(1e-12)
    } else {
        0.0
    };
    // Entropy of how the segment's energy is spread over its samples.
    let energy_entropy = -z
        .iter()
        .map(|v| v * v / (n * var))
        .filter(|&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>();
    // Sign changes of the 1st to 5th differences, in hundreds. Counted rather
    // than averaged, so they grow linearly with duration. The higher orders track the broadband
    // high-frequency floor and are nearly fixed per sample.
    let mut sign_changes = [0.0; DIFF_ORDERS];
    let mut d = diffs.clone();
    for slot in sign_changes.iter_mut() {
        *slot = d.windows(2).filter(|w| w[0] * w[1] < 0.0).count() as f64 / COUNT_UNIT;
        d = d.windows(2).map(|w| w[1] - w[0]).collect();
    }
    [
        (line_length + LOG_FLOOR).ln(),
        (m4 + LOG_FLOOR).ln(),
        (max_abs + LOG_FLOOR).ln(),
        (mobility + LOG_FLOOR).ln(),
        (complexity + LOG_FLOOR).ln(),
        energy_entropy / std::f64::consts::LN_2,
        sign_changes[0],
        sign_changes[1],
        sign_changes[2],
        sign_changes[3],
        sign_changes[4],
    ]
}
