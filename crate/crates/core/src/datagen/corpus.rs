use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ChannelGeometry, DataError, Recording, Result, SENTENCE_ONSET, WORD_ONSET};
use crate::seed;

/// Shape of the event-locked responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseConfig {
    /// Peak amplitude of the fast word transient, in background standard deviations.
    pub word_amplitude: f64,
    pub word_decay_s: f64,
    /// Per-subject oscillation frequency is drawn from this range.
    pub word_freq_hz: (f64, f64),
    /// Slower oscillatory tail of every word response.
    pub tail_amplitude: f64,
    pub tail_peak_s: f64,
    pub tail_freq_hz: f64,
    /// Monophasic envelope added at sentence onsets.
    pub sentence_amplitude: f64,
    pub sentence_peak_s: f64,
    /// Width of the Gaussian spatial kernel around each source.
    pub spatial_width: f64,
    /// Responses are truncated after this long.
    pub span_s: f64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            word_amplitude: 1.5,
            word_decay_s: 0.3,
            word_freq_hz: (9.0, 13.0),
            tail_amplitude: 1.0,
            tail_peak_s: 1.5,
            tail_freq_hz: 24.0,
            sentence_amplitude: 1.5,
            sentence_peak_s: 1.2,
            spatial_width: 0.7,
            span_s: 5.0,
        }
    }
}

/// A narrowband rhythm shared by nearby channels whose amplitude follows a
/// slow latent state. Windows cut at the same time see the same state on
/// every channel, so band powers co-vary across channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhythmConfig {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
    /// Amplitude relative to the unit-variance background.
    pub amplitude: f64,
    /// Correlation time of the log-amplitude state.
    pub timescale_s: f64,
    /// Standard deviation of the log-amplitude state.
    pub modulation: f64,
}

impl RhythmConfig {
    fn new(freq_hz: f64, bandwidth_hz: f64, amplitude: f64, timescale_s: f64, modulation: f64) -> Self {
        Self {
            freq_hz,
            bandwidth_hz,
            amplitude,
            timescale_s,
            modulation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub sessions_per_subject: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Mean word-onset rate.
    pub event_rate_hz: f64,
    /// Refractory spacing between consecutive word onsets.
    pub min_event_gap_s: f64,
    /// Probability that a word onset also starts a sentence.
    pub sentence_fraction: f64,
    /// Range of the per-subject 1/f^alpha background exponent.
    pub tilt_range: (f64, f64),
    /// Below this frequency the background spectrum is flat.
    pub background_floor_hz: f64,
    /// Fraction of background variance coming from shared latent sources.
    pub shared_background: f64,
    pub n_latent_sources: usize,
    pub rhythms: Vec<RhythmConfig>,
    /// Standard deviation of white sensor noise added to every channel, relative to the background.
    pub sensor_noise: f64,
    /// Width of the spatial kernel mapping rhythm sources to channels.
    pub rhythm_spatial_width: f64,
    /// Longest window any consumer will cut; sessions must be longer than this plus margins.
    pub max_interval_s: f64,
    pub edge_margin_s: f64,
    /// Allowed range of per-channel standard deviation.
    pub std_bounds: (f64, f64),
    pub response: ResponseConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_channels: 32,
            sessions_per_subject: 2,
            duration_s: 600.0,
            sample_rate_hz: 256,
            event_rate_hz: 0.25,
            min_event_gap_s: 1.0,
            sentence_fraction: 0.25,
            tilt_range: (1.6, 2.4),
            background_floor_hz: 0.05,
            shared_background: 0.4,
            n_latent_sources: 3,
            rhythms: vec![
                RhythmConfig::new(6.0, 1.0, 1.5, 8.0, 2.0),
                RhythmConfig::new(11.0, 1.5, 1.5, 0.4, 2.0),
                RhythmConfig::new(24.0, 3.0, 1.5, 6.0, 2.0),
                RhythmConfig::new(45.0, 6.0, 1.5, 0.4, 2.0),
            ],
            rhythm_spatial_width: 2.0,
            sensor_noise: 0.1,
            max_interval_s: 5.0,
            edge_margin_s: 1.0,
            std_bounds: (0.5, 4.0),
            response: ResponseConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(DataError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_channels == 0 {
            return Err(DataError::ZeroChannels);
        }
        if self.n_subjects == 0 {
            return bad("n_subjects", "must be positive");
        }
        if self.sessions_per_subject == 0 {
            return bad("sessions_per_subject", "must be positive");
        }
        if self.sample_rate_hz < 16 {
            return bad("sample_rate_hz", "must be at least 16");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s", "must be positive");
        }
        if !(self.max_interval_s > 0.0) || self.edge_margin_s < 0.0 {
            return bad("max_interval_s", "must be positive with a non-negative edge margin");
        }
        let required = self.max_interval_s + 2.0 * self.edge_margin_s;
        if self.duration_s < required {
            return Err(DataError::DurationTooShort {
                duration_s: self.duration_s,
                required_s: required,
            });
        }
        if self.event_rate_hz < 0.0 || !self.event_rate_hz.is_finite() {
            return bad("event_rate_hz", "must be non-negative");
        }
        if self.event_rate_hz > 0.0 && 1.0 / self.event_rate_hz <= self.min_event_gap_s {
            return bad("event_rate_hz", "mean spacing must exceed min_event_gap_s");
        }
        if !(self.min_event_gap_s > 0.0) {
            return bad("min_event_gap_s", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.sentence_fraction) {
            return bad("sentence_fraction", "must lie in [0, 1]");
        }
        if !(self.tilt_range.0 >= 0.0 && self.tilt_range.1 >= self.tilt_range.0) {
            return bad("tilt_range", "must be a non-negative ordered pair");
        }
        if !(0.0..1.0).contains(&self.shared_background) {
            return bad("shared_background", "must lie in [0, 1)");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if self.rhythms.iter().any(|r| {
            !(r.freq_hz > 0.0
                && r.freq_hz < nyquist
                && r.bandwidth_hz > 0.0
                && r.amplitude >= 0.0
                && r.timescale_s > 0.0
                && r.modulation >= 0.0)
        }) {
            return bad("rhythms", "need 0 < freq < Nyquist and positive bandwidth and timescale");
        }
        if !(self.sensor_noise >= 0.0) {
            return bad("sensor_noise", "must be non-negative");
        }
        if !self.rhythms.is_empty() && !(self.rhythm_spatial_width > 0.0) {
            return bad("rhythm_spatial_width", "must be positive");
        }
        if !(self.std_bounds.0 > 0.0 && self.std_bounds.1 > self.std_bounds.0) {
            return bad("std_bounds", "must be a positive ordered pair");
        }
        let r = &self.response;
        if !(r.word_decay_s > 0.0 && r.tail_peak_s > 0.0 && r.sentence_peak_s > 0.0 && r.span_s > 0.0) {
            return bad("response", "time constants must be positive");
        }
        if !(r.spatial_width > 0.0) {
            return bad("response.spatial_width", "must be positive");
        }
        if !(r.word_freq_hz.0 > 0.0 && r.word_freq_hz.1 >= r.word_freq_hz.0) {
            return bad("response.word_freq_hz", "must be a positive ordered pair");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }
}

/// Subject-level constants shared by all sessions of a subject.
struct SubjectModel {
    channels: Vec<ChannelGeometry>,
    tilt: f64,
    word_freq_hz: f64,
    word_source: [f64; 3],
    sentence_source: [f64; 3],
    latent_sources: Vec<[f64; 3]>,
    rhythm_sources: Vec<[f64; 3]>,
}

const SUBJECT_TAG: u64 = 0x5355_424A; // "SUBJ"

fn uniform_point(rng: &mut ChaCha8Rng, half_width: f64) -> [f64; 3] {
    [
        rng.random_range(-half_width..half_width),
        rng.random_range(-half_width..half_width),
        rng.random_range(-half_width..half_width),
    ]
}

fn subject_model(cfg: &CorpusConfig, seed: u64, subject_id: u32) -> SubjectModel {
    let mut rng = seed::derived_rng(seed, &[SUBJECT_TAG, subject_id as u64]);
    let channels = (0..cfg.n_channels as u32)
        .map(|channel_id| ChannelGeometry {
            channel_id,
            coords: uniform_point(&mut rng, 0.95),
        })
        .collect();
    let (tlo, thi) = cfg.tilt_range;
    let tilt = if thi > tlo { rng.random_range(tlo..thi) } else { tlo };
    let (flo, fhi) = cfg.response.word_freq_hz;
    let word_freq_hz = if fhi > flo { rng.random_range(flo..fhi) } else { flo };
    let word_source = uniform_point(&mut rng, 0.6);
    let sentence_source = uniform_point(&mut rng, 0.6);
    let latent_sources = (0..cfg.n_latent_sources)
        .map(|_| uniform_point(&mut rng, 0.8))
        .collect();
    let rhythm_sources = (0..cfg.rhythms.len()).map(|_| uniform_point(&mut rng, 0.8)).collect();
    SubjectModel {
        channels,
        tilt,
        word_freq_hz,
        word_source,
        sentence_source,
        latent_sources,
        rhythm_sources,
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64; 3], b: &[f64; 3], width: f64) -> f64 {
    (-dist2(a, b) / (2.0 * width * width)).exp()
}

/// Unit-variance 1/f^tilt noise, shaped in the frequency domain.
fn colored_noise(
    rng: &mut ChaCha8Rng,
    planner: &mut FftPlanner<f64>,
    n: usize,
    sample_rate_hz: f64,
    tilt: f64,
    f_floor: f64,
) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        if kk == 0 {
            *c = Complex::new(0.0, 0.0);
            continue;
        }
        let f = (kk as f64 * sample_rate_hz / n as f64).max(f_floor);
        *c *= f.powf(-tilt / 2.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    normalize(&mut out);
    out
}

/// Unit-variance noise with a Gaussian spectral peak at `freq_hz`.
fn narrowband_noise(
    rng: &mut ChaCha8Rng,
    planner: &mut FftPlanner<f64>,
    n: usize,
    sample_rate_hz: f64,
    freq_hz: f64,
    bandwidth_hz: f64,
) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sample_rate_hz / n as f64;
        let u = (f - freq_hz) / bandwidth_hz;
        *c *= (-0.5 * u * u).exp();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    normalize(&mut out);
    out
}

/// Stationary AR(1) with unit variance and correlation time `timescale_s`.
fn slow_state(rng: &mut ChaCha8Rng, n: usize, sample_rate_hz: f64, timescale_s: f64) -> Vec<f64> {
    let rho = (-1.0 / (timescale_s * sample_rate_hz)).exp();
    let innov = (1.0 - rho * rho).sqrt();
    let mut a: f64 = StandardNormal.sample(rng);
    (0..n)
        .map(|_| {
            let v = a;
            let e: f64 = StandardNormal.sample(rng);
            a = rho * a + innov * e;
            v
        })
        .collect()
}

fn normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

const EVENT_GAP_SHAPE: f64 = 4.0;

fn event_times(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    if cfg.event_rate_hz == 0.0 {
        return (Vec::new(), Vec::new());
    }
    let sr = cfg.sample_rate_hz as f64;
    let excess_mean = 1.0 / cfg.event_rate_hz - cfg.min_event_gap_s;
    // Gamma excess (shape 4) keeps speech-like regularity: per-session counts
    // stay close to rate x duration.
    let excess = Gamma::new(EVENT_GAP_SHAPE, excess_mean / EVENT_GAP_SHAPE).expect("positive scale");
    let mut words = Vec::new();
    let mut sentences = Vec::new();
    // Start mid-renewal so the first onset is not pinned to the session start.
    let mut t = rng.random_range(0.0..(1.0 / cfg.event_rate_hz));
    let last = (cfg.n_samples() - 1) as f64 / sr;
    while t <= last {
        let q = (t * sr).round() / sr;
        words.push(q);
        if rng.random_bool(cfg.sentence_fraction) {
            sentences.push(q);
        }
        t += cfg.min_event_gap_s + excess.sample(rng);
    }
    (words, sentences)
}

fn gamma_bump(tau: f64, peak: f64) -> f64 {
    let r = tau / peak;
    r * (1.0 - r).exp()
}

/// Generates one session. Deterministic in `(cfg, seed, subject_id, session_id)`.
pub fn generate_session(cfg: &CorpusConfig, seed: u64, subject_id: u32, session_id: u32) -> Result<Recording> {
    cfg.validate()?;
    let subject = subject_model(cfg, seed, subject_id);
    let mut rng = seed::derived_rng(seed, &[subject_id as u64, session_id as u64]);
    let n = cfg.n_samples();
    let sr = cfg.sample_rate_hz as f64;
    let n_chan = cfg.n_channels;
    let mut planner = FftPlanner::new();

    let (words, sentences) = event_times(cfg, &mut rng);

    let latents: Vec<Vec<f64>> = (0..cfg.n_latent_sources)
        .map(|_| colored_noise(&mut rng, &mut planner, n, sr, subject.tilt, cfg.background_floor_hz))
        .collect();
    let rhythms: Vec<Vec<f64>> = cfg
        .rhythms
        .iter()
        .map(|r| {
            let carrier = narrowband_noise(&mut rng, &mut planner, n, sr, r.freq_hz, r.bandwidth_hz);
            let state = slow_state(&mut rng, n, sr, r.timescale_s);
            carrier
                .iter()
                .zip(&state)
                .map(|(c, a)| r.amplitude * c * (r.modulation * a - 0.5 * r.modulation * r.modulation).exp())
                .collect()
        })
        .collect();
    let mut signal = Vec::with_capacity(n_chan * n);
    for ch in &subject.channels {
        let mut x = colored_noise(&mut rng, &mut planner, n, sr, subject.tilt, cfg.background_floor_hz);
        if !latents.is_empty() && cfg.shared_background > 0.0 {
            let w: Vec<f64> = subject
                .latent_sources
                .iter()
                .map(|s| kernel(&ch.coords, s, 0.6))
                .collect();
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let (a, b) = ((1.0 - cfg.shared_background).sqrt(), cfg.shared_background.sqrt());
            for (i, v) in x.iter_mut().enumerate() {
                let shared: f64 = latents.iter().zip(&w).map(|(l, w)| l[i] * w).sum::<f64>() / wn;
                *v = a * *v + b * shared;
            }
        }
        for (r, src) in rhythms.iter().zip(&subject.rhythm_sources) {
            let w = kernel(&ch.coords, src, cfg.rhythm_spatial_width);
            x.iter_mut().zip(r).for_each(|(v, r)| *v += w * r);
        }
        normalize(&mut x);
        if cfg.sensor_noise > 0.0 {
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.sensor_noise * e;
            }
        }
        signal.extend(x);
    }

    let resp = &cfg.response;
    let span = (resp.span_s * sr).round() as usize;
    let word_shape: Vec<f64> = (0..span)
        .map(|i| {
            let tau = i as f64 / sr;
            resp.word_amplitude
                * (-tau / resp.word_decay_s).exp()
                * (2.0 * std::f64::consts::PI * subject.word_freq_hz * tau).sin()
                + resp.tail_amplitude
                    * gamma_bump(tau, resp.tail_peak_s)
                    * (2.0 * std::f64::consts::PI * resp.tail_freq_hz * tau).sin()
        })
        .collect();
    let sentence_shape: Vec<f64> = (0..span)
        .map(|i| resp.sentence_amplitude * gamma_bump(i as f64 / sr, resp.sentence_peak_s))
        .collect();
    for (shape, times, source) in [
        (&word_shape, &words, &subject.word_source),
        (&sentence_shape, &sentences, &subject.sentence_source),
    ] {
        for (c, ch) in subject.channels.iter().enumerate() {
            let w = kernel(&ch.coords, source, resp.spatial_width);
            if w < 1e-6 {
                continue;
            }
            let row = &mut signal[c * n..(c + 1) * n];
            for &t in times {
                let s0 = (t * sr).round() as usize;
                for (i, v) in shape.iter().enumerate() {
                    match row.get_mut(s0 + i) {
                        Some(x) => *x += w * v,
                        None => break,
                    }
                }
            }
        }
    }

    let mut events = BTreeMap::new();
    events.insert(WORD_ONSET.to_string(), words);
    events.insert(SENTENCE_ONSET.to_string(), sentences);
    let rec = Recording {
        subject_id,
        session_id,
        sample_rate_hz: cfg.sample_rate_hz,
        n_samples: n,
        signal,
        channels: subject.channels,
        events,
    };
    rec.validate()?;
    let (lo, hi) = cfg.std_bounds;
    if let Some(sd) = rec.channel_std().into_iter().find(|sd| !(lo..=hi).contains(sd)) {
        return Err(DataError::InvalidConfig {
            field: "std_bounds",
            reason: format!("generated channel std {sd:.3} outside [{lo}, {hi}]"),
        });
    }
    Ok(rec)
}

/// Generates every session of every subject, ordered by (subject, session).
///
/// Each session is seeded by `seed ⊕ hash(subject_id, session_id)`, so any
/// subset of sessions can be generated independently and agrees bit for bit.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_subjects * cfg.sessions_per_subject);
    for subject in 0..cfg.n_subjects as u32 {
        for session in 0..cfg.sessions_per_subject as u32 {
            out.push(generate_session(cfg, seed, subject, session)?);
        }
    }
    Ok(out)
}
