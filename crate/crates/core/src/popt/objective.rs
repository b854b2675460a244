use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::model::{forward_batch, Ensemble, PoptVars, PoptWeights};
use super::{PoptError, Result};
use crate::encoder::IntervalSpec;
use crate::numerics::{Tape, Var};

/// Per-channel replacement probability for corrupted ensembles.
pub const CORRUPTION_RATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub subject_id: u32,
    pub session_id: u32,
    pub interval: IntervalSpec,
    pub ensemble: Ensemble,
    /// `true` when every channel comes from `interval`.
    pub cls_label: bool,
    /// `true` for channels swapped in from another interval.
    pub channel_labels: Vec<bool>,
}

impl PretrainExample {
    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        if self.channel_labels.len() != self.ensemble.n_chan() {
            return Err(PoptError::Labels(format!(
                "{} channel labels for {} channels",
                self.channel_labels.len(),
                self.ensemble.n_chan()
            )));
        }
        let replaced = self.channel_labels.iter().filter(|&&c| c).count();
        if self.cls_label && replaced > 0 {
            return Err(PoptError::Labels("consistent ensemble with replaced channels".into()));
        }
        if !self.cls_label && replaced == 0 {
            return Err(PoptError::Labels("corrupted ensemble without replaced channels".into()));
        }
        Ok(())
    }
}

/// Replaces each channel of `clean` by the same channel of `donor` with
/// probability [`CORRUPTION_RATE`], redrawing until at least one is replaced.
/// Returns the mixed embeddings and the replacement mask.
pub fn corrupt<R: rand::Rng + ?Sized>(clean: &Ensemble, donor: &Ensemble, rng: &mut R) -> Result<(Ensemble, Vec<bool>)> {
    if clean.channel_ids != donor.channel_ids || clean.h_dim != donor.h_dim {
        return Err(PoptError::Dimension("donor ensemble has different channels".into()));
    }
    let n = clean.n_chan();
    let mask = loop {
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(CORRUPTION_RATE)).collect();
        if m.iter().any(|&b| b) {
            break m;
        }
    };
    let mut out = clean.clone();
    for (i, &swap) in mask.iter().enumerate() {
        if swap {
            let h = clean.h_dim;
            out.embeddings[i * h..(i + 1) * h].copy_from_slice(donor.embedding(i));
        }
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub loss: f64,
    pub cls_loss: f64,
    pub channel_loss: f64,
    pub cls_accuracy: f64,
    /// Over channels of corrupted examples; `None` when the batch has none.
    pub channel_accuracy: Option<f64>,
}

fn accuracy(logits: &[f64], labels: &[f64]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    hits as f64 / labels.len() as f64
}

/// Records the pretraining loss on `tape` and returns it with metrics.
///
/// CLS target is 1 for consistent ensembles. The channel term averages over
/// the channels of corrupted examples only and is absent when there are none.
pub fn pretrain_loss_graph(
    tape: &mut Tape,
    vars: &PoptVars,
    weights: &PoptWeights,
    batch: &[PretrainExample],
) -> Result<(Var, PretrainMetrics)> {
    if batch.is_empty() {
        return Err(PoptError::EmptyBatch);
    }
    for ex in batch {
        ex.validate()?;
    }
    let refs: Vec<&Ensemble> = batch.iter().map(|e| &e.ensemble).collect();
    let out = forward_batch(tape, vars, &weights.config, &refs)?;

    let cls_logits = tape.matmul(out.cls, vars.cls_head_w)?;
    let cls_logits = tape.add_row(cls_logits, vars.cls_head_b)?;
    let cls_targets: Vec<f64> = batch.iter().map(|e| f64::from(u8::from(e.cls_label))).collect();
    let cls_loss = tape.bce_with_logits(cls_logits, &cls_targets)?;
    let cls_accuracy = accuracy(tape.value(cls_logits).values(), &cls_targets);

    let mut rows = Vec::new();
    let mut chan_targets = Vec::new();
    for (ex, &off) in batch.iter().zip(&out.channel_offsets) {
        if !ex.cls_label {
            rows.extend(off..off + ex.ensemble.n_chan());
            chan_targets.extend(ex.channel_labels.iter().map(|&c| f64::from(u8::from(c))));
        }
    }
    let (loss, channel_loss, channel_accuracy) = if rows.is_empty() {
        (cls_loss, 0.0, None)
    } else {
        let reprs = tape.gather_rows(out.channels, &rows)?;
        let logits = tape.matmul(reprs, vars.chan_head_w)?;
        let logits = tape.add_row(logits, vars.chan_head_b)?;
        let ch = tape.bce_with_logits(logits, &chan_targets)?;
        let acc = accuracy(tape.value(logits).values(), &chan_targets);
        (tape.add(cls_loss, ch)?, tape.value(ch).item(), Some(acc))
    };
    let metrics = PretrainMetrics {
        loss: tape.value(loss).item(),
        cls_loss: tape.value(cls_loss).item(),
        channel_loss,
        cls_accuracy,
        channel_accuracy,
    };
    Ok((loss, metrics))
}

pub fn pretrain_loss(batch: &[PretrainExample], weights: &PoptWeights) -> Result<(f64, PretrainMetrics)> {
    let mut tape = Tape::new();
    let vars = weights.bind_frozen(&mut tape)?;
    let (_, m) = pretrain_loss_graph(&mut tape, &vars, weights, batch)?;
    Ok((m.loss, m))
}

/// Loss, metrics and the gradient in the flat layout of `weights.params`.
pub fn pretrain_loss_and_grad(batch: &[PretrainExample], weights: &PoptWeights) -> Result<(PretrainMetrics, Vec<f64>)> {
    let mut tape = Tape::new();
    let flat_vars = weights.params.bind(&mut tape)?;
    let vars = super::PoptVars::from_slice(&weights.config, &flat_vars)?;
    let (loss, m) = pretrain_loss_graph(&mut tape, &vars, weights, batch)?;
    let grads = tape.backward(loss)?;
    Ok((m, weights.params.flat_grad(&grads, &flat_vars)?))
}

/// Linear readout from the CLS representation to one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DecodeHead {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            weights: vec![0.0; d_model],
            bias: 0.0,
        }
    }

    /// Weights and bias as one flat vector (weights first).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let d = self.weights.len();
        self.weights.copy_from_slice(&flat[..d]);
        self.bias = flat[d];
    }
}

pub fn decode_head(cls_repr: &[f64], head: &DecodeHead) -> Result<f64> {
    if cls_repr.len() != head.weights.len() {
        return Err(PoptError::Dimension(format!(
            "cls width {} vs head width {}",
            cls_repr.len(),
            head.weights.len()
        )));
    }
    let logit = cls_repr.iter().zip(&head.weights).map(|(a, b)| a * b).sum::<f64>() + head.bias;
    if !logit.is_finite() {
        return Err(PoptError::Dimension("non-finite decode input".into()));
    }
    Ok(logit)
}

/// Records decode logits `[batch, 1]` for `ensembles`. `head` is
/// `(w [d, 1], b [1])` already on the tape.
pub fn finetune_logits(
    tape: &mut Tape,
    vars: &PoptVars,
    weights: &PoptWeights,
    head: (Var, Var),
    ensembles: &[&Ensemble],
) -> Result<Var> {
    let out = forward_batch(tape, vars, &weights.config, ensembles)?;
    let z = tape.matmul(out.cls, head.0)?;
    Ok(tape.add_row(z, head.1)?)
}

/// Mean binary cross-entropy of the decode head on `labels`.
pub fn finetune_loss_graph(
    tape: &mut Tape,
    vars: &PoptVars,
    weights: &PoptWeights,
    head: (Var, Var),
    ensembles: &[&Ensemble],
    labels: &[bool],
) -> Result<Var> {
    if ensembles.len() != labels.len() {
        return Err(PoptError::Labels(format!(
            "{} labels for {} ensembles",
            labels.len(),
            ensembles.len()
        )));
    }
    let logits = finetune_logits(tape, vars, weights, head, ensembles)?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    Ok(tape.bce_with_logits(logits, &y)?)
}
