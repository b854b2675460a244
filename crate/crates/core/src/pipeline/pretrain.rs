use std::fmt;

use serde::{Deserialize, Serialize};

use super::data::{sample_pretrain_stream, validation_set, PretrainTables, Split};
use super::{ExperimentConfig, ModelSpec, PipelineError, Result};
use crate::numerics::{adam_step, AdamState};
use crate::popt::{pretrain_loss, pretrain_loss_and_grad, PoptWeights, PretrainExample};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ValLoss,
    ValRocAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub validation_metric: f64,
    pub key: String,
    pub metric_kind: MetricKind,
}

/// Minimum validation loss or maximum validation AUC; the earliest wins ties.
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Option<&CheckpointRecord> {
    records.iter().fold(None, |best: Option<&CheckpointRecord>, r| match best {
        None => Some(r),
        Some(b) => {
            let better = match r.metric_kind {
                MetricKind::ValLoss => r.validation_metric < b.validation_metric,
                MetricKind::ValRocAuc => r.validation_metric > b.validation_metric,
            };
            Some(if better { r } else { b })
        }
    })
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:e}", self.step, self.metric, self.value)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: String,
    pub lengths_s: Vec<f64>,
    pub best: CheckpointRecord,
    pub log: Vec<LogRecord>,
    /// Parameters at the selected step.
    pub weights: PoptWeights,
}

/// Seed of the shared initialization: every model starts from the same weights.
pub fn init_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.seed, &[seed::tag("popt-init")])
}

fn mean_val_loss(weights: &PoptWeights, val: &[Vec<PretrainExample>], chunk: usize) -> Result<f64> {
    // uniform average over lengths of the per-length mean loss
    let mut total = 0.0;
    for per_length in val {
        let mut sum = 0.0;
        for batch in per_length.chunks(chunk) {
            let (loss, _) = pretrain_loss(batch, weights)?;
            sum += loss * batch.len() as f64;
        }
        total += sum / per_length.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Trains one model on the pretext task and returns the parameters with the
/// lowest validation loss.
pub fn pretrain(cfg: &ExperimentConfig, tables: &PretrainTables, spec: ModelSpec) -> Result<PretrainOutcome> {
    let model = spec.to_string();
    let lengths = cfg.pretrain_lengths(spec);
    let steps = cfg.pretrain_steps(spec);
    let p = &cfg.pretrain;
    let mut weights = PoptWeights::init(&cfg.model, init_seed(cfg))?;
    let record = |step: usize, metric: f64| CheckpointRecord {
        step,
        validation_metric: metric,
        key: format!("{model}@{step}"),
        metric_kind: MetricKind::ValLoss,
    };
    if lengths.is_empty() {
        return Ok(PretrainOutcome {
            model: model.clone(),
            lengths_s: lengths,
            best: record(0, f64::NAN),
            log: Vec::new(),
            weights,
        });
    }
    let val = validation_set(tables, cfg, &lengths, seed::derive(cfg.seed, &[seed::tag("pretrain-val")]))?;
    if val.iter().any(|v| v.is_empty()) {
        return Err(PipelineError::EmptyValidation);
    }
    let mut stream = sample_pretrain_stream(
        tables,
        cfg,
        &lengths,
        Split::Train,
        seed::derive(cfg.seed, &[seed::tag("pretrain-train"), seed::tag(&model)]),
    )?;
    let mut adam = AdamState::new(weights.params.numel(), p.lr);
    let mut log = Vec::new();
    let mut best: Option<(CheckpointRecord, PoptWeights)> = None;
    let (mut window_loss, mut window_n) = (0.0, 0usize);
    for step in 1..=steps {
        let batch = stream.next_batch(p.batch_size);
        let (m, grad) = pretrain_loss_and_grad(&batch, &weights)?;
        if !m.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PipelineError::NonFiniteLoss { model, step });
        }
        adam_step(weights.params.flat_mut(), &grad, &mut adam)?;
        window_loss += m.loss;
        window_n += 1;
        if step % p.val_every == 0 || step == steps {
            let v = mean_val_loss(&weights, &val, 4 * p.batch_size)?;
            log.push(LogRecord {
                step,
                metric: "train_loss".into(),
                value: window_loss / window_n as f64,
            });
            log.push(LogRecord {
                step,
                metric: "val_loss".into(),
                value: v,
            });
            (window_loss, window_n) = (0.0, 0);
            let rec = record(step, v);
            let improved = best
                .as_ref()
                .is_none_or(|(b, _)| select_checkpoint(&[b.clone(), rec.clone()]) != Some(b));
            if improved {
                best = Some((rec, weights.clone()));
            }
        }
    }
    let (best, weights) = best.expect("at least one validation pass");
    Ok(PretrainOutcome {
        model,
        lengths_s: lengths,
        best,
        log,
        weights,
    })
}
