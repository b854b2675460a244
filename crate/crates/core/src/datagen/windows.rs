use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{DataError, Recording, Result};
use crate::encoder::IntervalSpec;
use crate::seed;

/// Spacing of the candidate grid for negative window centers.
pub const NEGATIVE_STRIDE_S: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub subject_id: u32,
    pub session_id: u32,
    pub interval: IntervalSpec,
    pub channel_ids: Vec<u32>,
    pub label: bool,
}

impl LabeledWindow {
    pub fn center_s(&self) -> f64 {
        self.interval.center_s()
    }
}

/// Ground-truth label of a window centered at `center_s`: positive iff the
/// center is within half a sample period of an event.
pub fn label_for_center(events: &[f64], center_s: f64, sample_rate_hz: u32) -> bool {
    let tol = 0.5 / sample_rate_hz as f64 + 1e-9;
    nearest_distance(events, center_s) <= tol
}

fn nearest_distance(events: &[f64], t: f64) -> f64 {
    let i = events.partition_point(|&e| e < t);
    let mut best = f64::INFINITY;
    if i < events.len() {
        best = best.min(events[i] - t);
    }
    if i > 0 {
        best = best.min(t - events[i - 1]);
    }
    best
}

/// Labeled windows of one length over the whole recording.
pub fn extract_labeled_windows(
    rec: &Recording,
    task: &str,
    length_s: f64,
    balance: bool,
    seed: u64,
) -> Result<Vec<LabeledWindow>> {
    extract_labeled_windows_in(rec, task, length_s, (0.0, rec.duration_s()), balance, seed)
}

/// Labeled windows lying entirely inside `span = [from_s, to_s)`.
///
/// Positives are centered on events. Negative centers come from a
/// [`NEGATIVE_STRIDE_S`] grid and keep at least `length_s / 2` from every
/// event of the task. With `balance`, the majority class is subsampled by a
/// seeded shuffle. Output is sorted by start time.
pub fn extract_labeled_windows_in(
    rec: &Recording,
    task: &str,
    length_s: f64,
    span: (f64, f64),
    balance: bool,
    seed: u64,
) -> Result<Vec<LabeledWindow>> {
    let events = rec.events(task)?;
    let duration = rec.duration_s();
    if !(length_s > 0.0 && length_s < duration) {
        return Err(DataError::InvalidLength {
            length_s,
            duration_s: duration,
        });
    }
    let (from, to) = (span.0.max(0.0), span.1.min(duration));
    let half = length_s / 2.0;
    let channel_ids: Vec<u32> = rec.channels.iter().map(|c| c.channel_id).collect();
    let fits = |start: f64| {
        let (lo, n) = rec.sample_range(start, length_s);
        start >= from - 1e-9 && start + length_s <= to + 1e-9 && lo + n <= rec.n_samples
    };
    let window = |start: f64, label: bool| LabeledWindow {
        subject_id: rec.subject_id,
        session_id: rec.session_id,
        interval: IntervalSpec::new(start, length_s, 0.0),
        channel_ids: channel_ids.clone(),
        label,
    };

    let mut positives: Vec<LabeledWindow> = events
        .iter()
        .map(|&e| e - half)
        .filter(|&s| fits(s))
        .map(|s| window(s, true))
        .collect();

    let mut negatives = Vec::new();
    let mut center = (from + half) / NEGATIVE_STRIDE_S;
    center = center.ceil() * NEGATIVE_STRIDE_S;
    while center + half <= to + 1e-9 {
        let start = center - half;
        if fits(start) && nearest_distance(events, center) >= half {
            negatives.push(window(start, false));
        }
        center += NEGATIVE_STRIDE_S;
    }
    if negatives.is_empty() {
        return Err(DataError::NoNegatives {
            task: task.to_string(),
            length_s,
        });
    }

    if balance {
        let mut rng = seed::derived_rng(seed, &[seed::tag(task), length_s.to_bits()]);
        let keep = positives.len().min(negatives.len());
        for class in [&mut positives, &mut negatives] {
            if class.len() > keep {
                class.shuffle(&mut rng);
                class.truncate(keep);
            }
        }
    }
    let mut out = positives;
    out.extend(negatives);
    out.sort_by(|a, b| a.interval.start_s.total_cmp(&b.interval.start_s));
    Ok(out)
}

/// `k` channel ids drawn uniformly without replacement, sorted ascending.
pub fn select_channel_subset(rec: &Recording, k: usize, seed: u64) -> Result<Vec<u32>> {
    let n = rec.n_chan();
    if k == 0 || k > n {
        return Err(DataError::SubsetOutOfRange { k, n_chan: n });
    }
    let mut rng = seed::derived_rng(seed, &[rec.subject_id as u64, 0x4348_414E]);
    let mut ids: Vec<u32> = index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| rec.channels[i].channel_id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::datagen::{ChannelGeometry, WORD_ONSET};

    fn toy(events: Vec<f64>) -> Recording {
        let n_samples = 64 * 40;
        let mut ev = BTreeMap::new();
        ev.insert(WORD_ONSET.to_string(), events);
        Recording {
            subject_id: 0,
            session_id: 0,
            sample_rate_hz: 64,
            n_samples,
            signal: vec![0.0; 4 * n_samples],
            channels: (0..4)
                .map(|i| ChannelGeometry {
                    channel_id: i,
                    coords: [0.1 * i as f64, 0.0, 0.0],
                })
                .collect(),
            events: ev,
        }
    }

    #[test]
    fn positive_window_centered_on_event() {
        let rec = toy(vec![10.0, 25.0]);
        let w = extract_labeled_windows(&rec, WORD_ONSET, 2.0, false, 0).unwrap();
        let pos: Vec<_> = w.iter().filter(|w| w.label).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!(pos[0].interval.start_s, 9.0);
        assert_eq!(pos[0].interval.end_s(), 11.0);
    }

    #[test]
    fn balance_equalizes_classes() {
        let rec = toy(vec![5.0, 10.0, 25.0]);
        let w = extract_labeled_windows(&rec, WORD_ONSET, 2.0, true, 3).unwrap();
        let p = w.iter().filter(|w| w.label).count();
        assert_eq!(p, 3);
        assert_eq!(w.len(), 6);
    }

    #[test]
    fn negatives_keep_their_distance() {
        let rec = toy(vec![5.0, 10.0, 25.0]);
        for len in [1.0, 2.0, 3.0] {
            for w in extract_labeled_windows(&rec, WORD_ONSET, len, false, 0).unwrap() {
                if !w.label {
                    let c = w.center_s();
                    assert!(rec.events(WORD_ONSET).unwrap().iter().all(|e| (e - c).abs() >= len / 2.0));
                }
            }
        }
    }

    #[test]
    fn errors() {
        let rec = toy(vec![5.0]);
        assert!(matches!(
            extract_labeled_windows(&rec, "nope", 1.0, false, 0),
            Err(DataError::UnknownTask(_))
        ));
        assert!(matches!(
            extract_labeled_windows(&rec, WORD_ONSET, 0.0, false, 0),
            Err(DataError::InvalidLength { .. })
        ));
        let dense = toy((0..79).map(|i| 0.5 * i as f64 + 0.25).collect());
        assert!(matches!(
            extract_labeled_windows(&dense, WORD_ONSET, 2.0, false, 0),
            Err(DataError::NoNegatives { .. })
        ));
    }

    #[test]
    fn channel_subsets() {
        let rec = toy(vec![]);
        assert_eq!(select_channel_subset(&rec, 4, 9).unwrap(), vec![0, 1, 2, 3]);
        let one = select_channel_subset(&rec, 1, 9).unwrap();
        assert_eq!(one, select_channel_subset(&rec, 1, 9).unwrap());
        assert_eq!(one.len(), 1);
        assert!(select_channel_subset(&rec, 0, 9).is_err());
        assert!(select_channel_subset(&rec, 5, 9).is_err());
    }
}
