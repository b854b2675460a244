use rand::seq::SliceRandom;

use super::data::{block_assignment, DownstreamSet, Split, SplitSet};
use super::pretrain::{init_seed, select_checkpoint, CheckpointRecord, MetricKind};
use super::{ExperimentConfig, PipelineError, Result};
use crate::analysis::roc_auc;
use crate::numerics::{adam_step, AdamState, ParamStore, Tape};
use crate::popt::{finetune_logits, finetune_loss_graph, Ensemble, PoptVars, PoptWeights};
use crate::seed;

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub test_auc: f64,
    pub best: CheckpointRecord,
    /// Validation AUC after each epoch.
    pub val_aucs: Vec<f64>,
}

/// Zero-initialized decode head: `decode.w [d, 1]`, `decode.b [1]`.
pub fn init_head_store(d_model: usize) -> ParamStore {
    let mut head = ParamStore::new();
    head.push("decode.w", vec![d_model, 1], vec![0.0; d_model])
        .expect("consistent shape");
    head.push("decode.b", vec![1], vec![0.0]).expect("consistent shape");
    head
}

fn predict(body: &PoptWeights, head: &ParamStore, ensembles: &[Ensemble]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ensembles.len());
    for chunk in ensembles.chunks(64) {
        let mut tape = Tape::new();
        let vars = body.bind_frozen(&mut tape)?;
        let w = tape.leaf(head.tensor(0))?;
        let b = tape.leaf(head.tensor(1))?;
        let refs: Vec<&Ensemble> = chunk.iter().collect();
        let z = finetune_logits(&mut tape, &vars, body, (w, b), &refs)?;
        out.extend_from_slice(tape.value(z).values());
    }
    Ok(out)
}

fn check_split(name: &str, s: &SplitSet) -> Result<()> {
    if !s.has_both_classes() {
        return Err(PipelineError::DegenerateSplit(format!(
            "{name} split has {} windows and a single class",
            s.labels.len()
        )));
    }
    Ok(())
}

/// Finetunes a decode head (and the body unless `probe`) on one subject,
/// interval length and seed. Selects the epoch with the best validation
/// ROC-AUC and reports test ROC-AUC at that epoch.
pub fn finetune(
    cfg: &ExperimentConfig,
    init: Option<&PoptWeights>,
    set: &DownstreamSet,
    run_seed: u64,
    model: &str,
) -> Result<FinetuneOutcome> {
    let f = &cfg.finetune;
    let roles = block_assignment(cfg, set.subject_id, run_seed);
    let train = set.split(&roles, Split::Train);
    let val = set.split(&roles, Split::Val);
    let test = set.split(&roles, Split::Test);
    check_split("train", &train)?;
    check_split("validation", &val)?;
    check_split("test", &test)?;

    let mut body = match init {
        Some(w) => w.clone(),
        None => PoptWeights::init(&cfg.model, init_seed(cfg))?,
    };
    let mut head = init_head_store(cfg.model.d_model);
    let mut body_adam = AdamState::new(body.params.numel(), f.lr);
    let mut head_adam = AdamState::new(head.numel(), f.lr);
    let mut rng = seed::derived_rng(
        cfg.seed,
        &[
            seed::tag("finetune"),
            seed::tag(model),
            seed::tag(&set.task),
            set.subject_id as u64,
            set.length_s.to_bits(),
            run_seed,
        ],
    );
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let mut records = Vec::with_capacity(f.epochs);
    let mut val_aucs = Vec::with_capacity(f.epochs);
    let mut best: Option<(CheckpointRecord, PoptWeights, ParamStore)> = None;
    for epoch in 1..=f.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(f.batch_size) {
            let ens: Vec<&Ensemble> = idx.iter().map(|&i| &train.ensembles[i]).collect();
            let labels: Vec<bool> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let body_vars = if f.probe {
                None
            } else {
                Some(body.params.bind(&mut tape)?)
            };
            let vars = match &body_vars {
                Some(v) => PoptVars::from_slice(&cfg.model, v)?,
                None => body.bind_frozen(&mut tape)?,
            };
            let head_vars = head.bind(&mut tape)?;
            let loss = finetune_loss_graph(&mut tape, &vars, &body, (head_vars[0], head_vars[1]), &ens, &labels)?;
            if !tape.value(loss).item().is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    model: model.to_string(),
                    step: epoch,
                });
            }
            let grads = tape.backward(loss)?;
            let hg = head.flat_grad(&grads, &head_vars)?;
            adam_step(head.flat_mut(), &hg, &mut head_adam)?;
            if let Some(bv) = &body_vars {
                let bg = body.params.flat_grad(&grads, bv)?;
                adam_step(body.params.flat_mut(), &bg, &mut body_adam)?;
            }
        }
        let auc = roc_auc(&predict(&body, &head, &val.ensembles)?, &val.labels)?;
        val_aucs.push(auc);
        let rec = CheckpointRecord {
            step: epoch,
            validation_metric: auc,
            key: format!("{model}/{}/s{}/{}s/seed{run_seed}@{epoch}", set.task, set.subject_id, set.length_s),
            metric_kind: MetricKind::ValRocAuc,
        };
        records.push(rec.clone());
        if select_checkpoint(&records) == Some(&rec) {
            best = Some((rec, body.clone(), head.clone()));
        }
    }
    let (best, body, head) = best.expect("at least one epoch");
    let test_auc = roc_auc(&predict(&body, &head, &test.ensembles)?, &test.labels)?;
    Ok(FinetuneOutcome {
        test_auc,
        best,
        val_aucs,
    })
}
