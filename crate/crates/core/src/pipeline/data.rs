use rand::seq::{index, SliceRandom};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{config_error, ExperimentConfig, PipelineError, Result};
use crate::datagen::{extract_labeled_windows_in, select_channel_subset, DataError, LabeledWindow, Recording};
use crate::encoder::{tile_intervals, EmbeddingTable, IntervalSpec, TemporalEncoder};
use crate::popt::{corrupt, Ensemble, PretrainExample};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Precomputed embeddings of the pretraining sessions: tiled windows per
/// length, with a trailing time block reserved for validation.
#[derive(Debug, Clone)]
pub struct PretrainTables {
    pub sessions: Vec<SessionTables>,
    pub h_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SessionTables {
    pub subject_id: u32,
    pub session_id: u32,
    pub coords: Vec<[f64; 3]>,
    /// `(length_s, train table, validation table)`.
    pub by_length: Vec<(f64, EmbeddingTable, EmbeddingTable)>,
    /// Validation windows start at or after this time.
    pub val_start_s: f64,
}

impl SessionTables {
    pub fn table(&self, length_s: f64, split: Split) -> Option<&EmbeddingTable> {
        self.by_length
            .iter()
            .find(|(l, _, _)| *l == length_s)
            .map(|(_, t, v)| if split == Split::Val { v } else { t })
    }
}

/// Sessions used for pretraining: the first `pretrain_sessions` of each subject.
pub fn is_pretrain_session(cfg: &ExperimentConfig, rec: &Recording) -> bool {
    (rec.session_id as usize) < cfg.pretrain.pretrain_sessions
}

pub fn pretrain_tables(
    cfg: &ExperimentConfig,
    corpus: &[Recording],
    encoder: &TemporalEncoder,
    lengths_s: &[f64],
) -> Result<PretrainTables> {
    let mut sessions = Vec::new();
    for rec in corpus.iter().filter(|r| is_pretrain_session(cfg, r)) {
        let dur = rec.duration_s();
        let val_start = (dur * (1.0 - cfg.pretrain.val_fraction)).floor();
        let ids: Vec<u32> = rec.channels.iter().map(|c| c.channel_id).collect();
        let mut by_length = Vec::new();
        for &l in lengths_s {
            if l >= val_start || l >= dur - val_start {
                return Err(DataError::InvalidLength {
                    length_s: l,
                    duration_s: dur,
                }
                .into());
            }
            let gap = cfg.pretrain.gap_s;
            let train = EmbeddingTable::build(encoder, rec, &tile_intervals(0.0, val_start, l, gap), &ids)?;
            let val = EmbeddingTable::build(encoder, rec, &tile_intervals(val_start, dur, l, gap), &ids)?;
            by_length.push((l, train, val));
        }
        sessions.push(SessionTables {
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            coords: rec.channels.iter().map(|c| c.coords).collect(),
            by_length,
            val_start_s: val_start,
        });
    }
    if sessions.is_empty() {
        return Err(config_error("pretrain.pretrain_sessions", "no pretraining sessions in corpus"));
    }
    Ok(PretrainTables {
        sessions,
        h_dim: encoder.h_dim(),
    })
}

/// Endless, seeded stream of pretraining examples.
///
/// Each draw picks a length uniformly from `lengths`, a session and a window
/// uniformly, and a random channel subset. With probability
/// `negative_fraction` the ensemble is corrupted with the same channels from
/// a non-overlapping window of the same session and length.
#[derive(Debug, Clone)]
pub struct PretrainStream<'a> {
    tables: &'a PretrainTables,
    lengths: Vec<f64>,
    split: Split,
    ensemble_channels: usize,
    negative_fraction: f64,
    rng: ChaCha8Rng,
}

pub fn sample_pretrain_stream<'a>(
    tables: &'a PretrainTables,
    cfg: &ExperimentConfig,
    lengths_s: &[f64],
    split: Split,
    seed: u64,
) -> Result<PretrainStream<'a>> {
    if lengths_s.is_empty() {
        return Err(config_error("pretrain lengths", "must not be empty"));
    }
    for s in &tables.sessions {
        for &l in lengths_s {
            let t = s
                .table(l, split)
                .ok_or_else(|| config_error("pretrain lengths", format!("no precomputed table for {l} s")))?;
            // a donor window must exist for every window
            let span = t.starts.last().copied().unwrap_or(0.0) - t.starts.first().copied().unwrap_or(0.0);
            if t.n_windows() < 2 || span < 2.0 * l {
                return Err(PipelineError::Data(DataError::InvalidLength {
                    length_s: l,
                    duration_s: span + l,
                }));
            }
        }
    }
    Ok(PretrainStream {
        tables,
        lengths: lengths_s.to_vec(),
        split,
        ensemble_channels: cfg.pretrain.ensemble_channels,
        negative_fraction: cfg.pretrain.negative_fraction,
        rng: seed::derived_rng(seed, &[seed::tag("pretrain-stream")]),
    })
}

impl PretrainStream<'_> {
    pub fn next_batch(&mut self, n: usize) -> Vec<PretrainExample> {
        (0..n).map(|_| self.draw()).collect()
    }

    fn draw(&mut self) -> PretrainExample {
        let rng = &mut self.rng;
        let l = self.lengths[rng.random_range(0..self.lengths.len())];
        let s = &self.tables.sessions[rng.random_range(0..self.tables.sessions.len())];
        let t = s.table(l, self.split).expect("checked at construction");
        let w = rng.random_range(0..t.n_windows());
        let k = self.ensemble_channels.min(t.n_chan());
        let mut chans: Vec<usize> = index::sample(rng, t.n_chan(), k).into_vec();
        chans.sort_unstable();
        let ensemble_at = |win: usize| Ensemble {
            channel_ids: chans.iter().map(|&c| t.channel_ids[c]).collect(),
            coords: chans.iter().map(|&c| s.coords[c]).collect(),
            embeddings: chans.iter().flat_map(|&c| t.get(win, c).to_vec()).collect(),
            h_dim: t.h_dim,
        };
        let clean = ensemble_at(w);
        let interval = IntervalSpec::new(t.starts[w], l, 0.0);
        let (ensemble, cls_label, channel_labels) = if rng.random_bool(self.negative_fraction) {
            let donor = loop {
                let d = rng.random_range(0..t.n_windows());
                if (t.starts[d] - t.starts[w]).abs() >= l {
                    break d;
                }
            };
            let (mixed, mask) = corrupt(&clean, &ensemble_at(donor), rng).expect("same channels");
            (mixed, false, mask)
        } else {
            let n = clean.n_chan();
            (clean, true, vec![false; n])
        };
        PretrainExample {
            subject_id: s.subject_id,
            session_id: s.session_id,
            interval,
            ensemble,
            cls_label,
            channel_labels,
        }
    }
}

impl Iterator for PretrainStream<'_> {
    type Item = PretrainExample;

    fn next(&mut self) -> Option<PretrainExample> {
        Some(self.draw())
    }
}

/// Fixed validation examples, one list per length.
pub fn validation_set(
    tables: &PretrainTables,
    cfg: &ExperimentConfig,
    lengths_s: &[f64],
    seed: u64,
) -> Result<Vec<Vec<PretrainExample>>> {
    lengths_s
        .iter()
        .map(|&l| {
            let mut s = sample_pretrain_stream(tables, cfg, &[l], Split::Val, seed::derive(seed, &[l.to_bits()]))?;
            Ok(s.next_batch(cfg.pretrain.val_examples))
        })
        .collect()
}

/// Train/validation/test role of each time block for one `(subject, seed)`.
pub fn block_assignment(cfg: &ExperimentConfig, subject_id: u32, run_seed: u64) -> Vec<Split> {
    let f = &cfg.finetune;
    let mut order: Vec<usize> = (0..f.n_blocks).collect();
    order.shuffle(&mut seed::derived_rng(
        cfg.seed,
        &[seed::tag("blocks"), subject_id as u64, run_seed],
    ));
    let mut roles = vec![Split::Test; f.n_blocks];
    for (rank, &b) in order.iter().enumerate() {
        if rank < f.train_blocks {
            roles[b] = Split::Train;
        } else if rank < f.train_blocks + f.val_blocks {
            roles[b] = Split::Val;
        }
    }
    roles
}

/// Labeled downstream windows of one `(subject, task, length)` with their
/// embeddings on the subject's fixed channel subset.
#[derive(Debug, Clone)]
pub struct DownstreamSet {
    pub subject_id: u32,
    pub task: String,
    pub length_s: f64,
    pub channel_ids: Vec<u32>,
    pub coords: Vec<[f64; 3]>,
    pub windows: Vec<LabeledWindow>,
    /// Time block of each window.
    pub blocks: Vec<usize>,
    pub embeddings: EmbeddingTable,
}

/// Windows of one split, ready for the model.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub ensembles: Vec<Ensemble>,
    pub labels: Vec<bool>,
    pub windows: Vec<IntervalSpec>,
}

impl SplitSet {
    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|&l| l) && self.labels.iter().any(|&l| !l)
    }
}

impl DownstreamSet {
    /// Builds the set from the subject's first downstream session. Windows are
    /// extracted block by block so none straddles a block boundary.
    pub fn build(
        cfg: &ExperimentConfig,
        rec: &Recording,
        encoder: &TemporalEncoder,
        task: &str,
        length_s: f64,
    ) -> Result<Self> {
        let f = &cfg.finetune;
        let channel_ids = select_channel_subset(rec, f.channels_per_subject, cfg.seed)?;
        let block_len = rec.duration_s() / f.n_blocks as f64;
        let mut windows = Vec::new();
        let mut blocks = Vec::new();
        for b in 0..f.n_blocks {
            let span = (b as f64 * block_len, (b + 1) as f64 * block_len);
            let bal_seed = seed::derive(cfg.seed, &[seed::tag("balance"), rec.subject_id as u64, b as u64]);
            match extract_labeled_windows_in(rec, task, length_s, span, true, bal_seed) {
                Ok(ws) => {
                    blocks.extend(std::iter::repeat_n(b, ws.len()));
                    windows.extend(ws);
                }
                // a block with no room for negatives contributes nothing
                Err(DataError::NoNegatives { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let intervals: Vec<IntervalSpec> = windows.iter().map(|w| w.interval).collect();
        let embeddings = EmbeddingTable::build(encoder, rec, &intervals, &channel_ids)?;
        let coords = channel_ids
            .iter()
            .map(|&id| rec.channels[rec.channel_index(id).expect("subset of rec")].coords)
            .collect();
        Ok(Self {
            subject_id: rec.subject_id,
            task: task.to_string(),
            length_s,
            channel_ids,
            coords,
            windows,
            blocks,
            embeddings,
        })
    }

    pub fn ensemble(&self, i: usize) -> Ensemble {
        Ensemble {
            channel_ids: self.channel_ids.clone(),
            coords: self.coords.clone(),
            embeddings: self.embeddings.window(i).to_vec(),
            h_dim: self.embeddings.h_dim,
        }
    }

    pub fn split(&self, roles: &[Split], which: Split) -> SplitSet {
        let mut s = SplitSet {
            ensembles: Vec::new(),
            labels: Vec::new(),
            windows: Vec::new(),
        };
        for (i, w) in self.windows.iter().enumerate() {
            if roles[self.blocks[i]] == which {
                s.ensembles.push(self.ensemble(i));
                s.labels.push(w.label);
                s.windows.push(w.interval);
            }
        }
        s
    }
}
