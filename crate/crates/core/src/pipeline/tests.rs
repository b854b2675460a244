use rand::RngExt;

use super::*;
use crate::datagen::{generate_corpus, Recording, WORD_ONSET};
use crate::encoder::TemporalEncoder;
use crate::seed;

fn tiny() -> (ExperimentConfig, Vec<Recording>, TemporalEncoder) {
    let mut cfg = ExperimentConfig::smoke();
    cfg.corpus.n_channels = 6;
    cfg.corpus.duration_s = 120.0;
    cfg.corpus.sample_rate_hz = 128;
    cfg.encoder.sample_rate_hz = 128;
    cfg.encoder.bands_hz.retain(|b| b.1 <= 64.0);
    cfg.pretrain.ensemble_channels = 4;
    cfg.pretrain.tsap_lengths_s = vec![1.0, 2.0, 4.0, 5.0];
    cfg.pretrain.holdout_lengths_s = vec![3.0];
    cfg.pretrain.fixed_lengths_s = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    cfg.finetune.channels_per_subject = 4;
    cfg.finetune.n_blocks = 5;
    cfg.finetune.train_blocks = 3;
    cfg.finetune.val_blocks = 1;
    cfg.validate().unwrap();
    let corpus = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
    let enc = TemporalEncoder::new(cfg.encoder.clone()).unwrap();
    (cfg, corpus, enc)
}

#[test]
fn stream_respects_length_sets() {
    let (cfg, corpus, enc) = tiny();
    let lengths = [1.0, 2.0, 3.0, 4.0, 5.0];
    let tables = pretrain_tables(&cfg, &corpus, &enc, &lengths).unwrap();
    let five: Vec<_> = sample_pretrain_stream(&tables, &cfg, &[5.0], Split::Train, 1)
        .unwrap()
        .take(50)
        .collect();
    assert!(five.iter().all(|e| e.interval.length_s == 5.0));

    let tsap = &cfg.pretrain.tsap_lengths_s;
    let mut counts = [0usize; 4];
    for ex in sample_pretrain_stream(&tables, &cfg, tsap, Split::Train, 2).unwrap().take(10_000) {
        assert!(!cfg.pretrain.holdout_lengths_s.contains(&ex.interval.length_s));
        ex.validate().unwrap();
        counts[tsap.iter().position(|&l| l == ex.interval.length_s).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn stream_is_deterministic_and_respects_validation_block() {
    let (cfg, corpus, enc) = tiny();
    let tables = pretrain_tables(&cfg, &corpus, &enc, &[1.0, 2.0]).unwrap();
    let a: Vec<_> = sample_pretrain_stream(&tables, &cfg, &[1.0, 2.0], Split::Train, 3)
        .unwrap()
        .take(30)
        .collect();
    let b: Vec<_> = sample_pretrain_stream(&tables, &cfg, &[1.0, 2.0], Split::Train, 3)
        .unwrap()
        .take(30)
        .collect();
    assert_eq!(a, b);
    let val_start = tables.sessions[0].val_start_s;
    assert!(a.iter().all(|e| e.interval.end_s() <= val_start + 1e-9));
    let v = validation_set(&tables, &cfg, &[2.0], 4).unwrap();
    assert!(v[0].iter().all(|e| e.interval.start_s >= val_start));
    assert!(tables.sessions.iter().all(|s| s.session_id == 0));
}

#[test]
fn too_long_length_is_rejected() {
    let (cfg, corpus, enc) = tiny();
    assert!(pretrain_tables(&cfg, &corpus, &enc, &[60.0]).is_err());
}

fn rec(step: usize, v: f64, kind: MetricKind) -> CheckpointRecord {
    CheckpointRecord {
        step,
        validation_metric: v,
        key: step.to_string(),
        metric_kind: kind,
    }
}

#[test]
fn checkpoint_selection() {
    let log = [
        rec(100, 0.9, MetricKind::ValLoss),
        rec(200, 0.4, MetricKind::ValLoss),
        rec(300, 0.6, MetricKind::ValLoss),
    ];
    assert_eq!(select_checkpoint(&log).unwrap().step, 200);
    let log = [
        rec(1, 0.70, MetricKind::ValRocAuc),
        rec(2, 0.81, MetricKind::ValRocAuc),
        rec(3, 0.78, MetricKind::ValRocAuc),
    ];
    assert_eq!(select_checkpoint(&log).unwrap().step, 2);
}

#[test]
fn pretraining_is_deterministic_and_beats_chance() {
    let (mut cfg, corpus, enc) = tiny();
    cfg.pretrain.steps = 60;
    cfg.pretrain.val_every = 20;
    cfg.pretrain.lr = 3e-3;
    let tables = pretrain_tables(&cfg, &corpus, &enc, &[2.0]).unwrap();
    let a = pretrain(&cfg, &tables, ModelSpec::Fixed(2.0)).unwrap();
    let b = pretrain(&cfg, &tables, ModelSpec::Fixed(2.0)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log.len(), 6);
    assert!(a.best.validation_metric < 2.0 * std::f64::consts::LN_2);
}

#[test]
fn block_roles_partition_the_session() {
    let (cfg, corpus, enc) = tiny();
    let roles = block_assignment(&cfg, 0, 3);
    assert_eq!(roles.iter().filter(|r| **r == Split::Train).count(), 3);
    assert_eq!(roles.iter().filter(|r| **r == Split::Val).count(), 1);
    assert_eq!(roles.iter().filter(|r| **r == Split::Test).count(), 1);
    let down = corpus.iter().find(|r| r.session_id == 1).unwrap();
    let set = DownstreamSet::build(&cfg, down, &enc, WORD_ONSET, 2.0).unwrap();
    let parts: Vec<_> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| set.split(&roles, s).windows)
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            for a in &parts[i] {
                for b in &parts[j] {
                    assert!(a.end_s() <= b.start_s || b.end_s() <= a.start_s);
                }
            }
        }
    }
}

/// A downstream set whose first embedding coordinate carries the label.
fn planted(cfg: &ExperimentConfig, corpus: &[Recording], enc: &TemporalEncoder, signal: f64, flip: u64) -> DownstreamSet {
    let down = corpus.iter().find(|r| r.session_id == 1).unwrap();
    let mut set = DownstreamSet::build(cfg, down, enc, WORD_ONSET, 1.0).unwrap();
    let mut rng = seed::rng(flip);
    let h = set.embeddings.h_dim;
    let n_chan = set.channel_ids.len();
    for (i, w) in set.windows.iter_mut().enumerate() {
        if flip > 0 {
            w.label = rng.random_bool(0.5);
        }
        let off = if w.label { signal } else { -signal };
        for c in 0..n_chan {
            set.embeddings.data[(i * n_chan + c) * h] += off;
        }
    }
    set
}

#[test]
fn planted_signal_is_found() {
    let (mut cfg, corpus, enc) = tiny();
    cfg.finetune.epochs = 10;
    cfg.finetune.lr = 3e-3;
    let set = planted(&cfg, &corpus, &enc, 3.0, 0);
    let out = finetune(&cfg, None, &set, 0, "non-pretrained").unwrap();
    assert!(out.test_auc > 0.95, "{}", out.test_auc);
    assert_eq!(out.val_aucs.len(), 10);
    let best = out
        .val_aucs
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.validation_metric, best);
}

#[test]
fn coin_flip_labels_stay_near_chance() {
    let (mut cfg, corpus, enc) = tiny();
    cfg.finetune.epochs = 3;
    let mut aucs = Vec::new();
    for s in 0..5u64 {
        let set = planted(&cfg, &corpus, &enc, 0.0, 100 + s);
        aucs.push(finetune(&cfg, None, &set, s, "non-pretrained").unwrap().test_auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "{aucs:?}");
}

fn hand_table() -> ResultTable {
    let mut t = ResultTable::default();
    for (model, base) in [("fixed-1s", 0.7), ("tsap", 0.72)] {
        for subject in 0..2 {
            for seed in 0..2 {
                t.insert(
                    CellKey {
                        model: model.into(),
                        task: WORD_ONSET.into(),
                        eval_length_s: 1.0,
                        subject,
                        seed,
                    },
                    base + 0.01 * (subject * 2 + seed as u32) as f64,
                );
            }
        }
    }
    t
}

#[test]
fn aggregation_matches_hand_computation() {
    let mut t = ResultTable::default();
    for (i, v) in [0.6, 0.7, 0.8].into_iter().enumerate() {
        t.insert(
            CellKey {
                model: "m".into(),
                task: WORD_ONSET.into(),
                eval_length_s: 2.0,
                subject: i as u32,
                seed: 0,
            },
            v,
        );
    }
    let s = t.summary("m", WORD_ONSET, 2.0).unwrap();
    assert!((s.mean - 0.7).abs() < 1e-12);
    // sd = 0.1, se = 0.1 / sqrt(3)
    assert!((s.stderr - 0.1 / 3f64.sqrt()).abs() < 1e-12);
    assert!(t.summary("m", WORD_ONSET, 1.0).is_err());
}

#[test]
fn difference_from_optimal_is_paired() {
    let t = hand_table();
    let self_diff = difference_from_optimal(&t, "fixed-1s", WORD_ONSET, 1.0).unwrap();
    assert!(self_diff.iter().all(|&d| d == 0.0));
    let d = difference_from_optimal(&t, "tsap", WORD_ONSET, 1.0).unwrap();
    assert_eq!(d.len(), 4);
    assert!(d.iter().all(|&x| (x - 0.02).abs() < 1e-12));
}

#[test]
fn results_round_trip_through_tsv() {
    let t = hand_table();
    let text = t.to_tsv();
    assert!(text.starts_with(RESULTS_HEADER));
    assert_eq!(ResultTable::from_tsv(&text).unwrap(), t);
    assert!(ResultTable::from_tsv("nope\n").is_err());
}

#[test]
fn missing_cells_are_errors() {
    let (cfg, _, _) = tiny();
    assert!(matches!(
        hand_table().check_complete(&cfg),
        Err(PipelineError::MissingCell(_))
    ));
}

#[test]
fn config_validation_names_fields() {
    let mut cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    ExperimentConfig::smoke().validate().unwrap();
    ExperimentConfig::acceptance().validate().unwrap();
    cfg.pretrain.holdout_lengths_s = vec![2.0];
    match cfg.validate() {
        Err(PipelineError::Config { field, .. }) => assert_eq!(field, "pretrain.holdout_lengths_s"),
        other => panic!("{other:?}"),
    }
    assert_eq!(cfg.pretrain.tsap_steps(), 2 * cfg.pretrain.steps);
}

#[test]
fn model_names_round_trip() {
    let cfg = ExperimentConfig::default();
    let names: Vec<String> = cfg.models().iter().map(|m| m.to_string()).collect();
    assert_eq!(
        names,
        ["non-pretrained", "fixed-1s", "fixed-2s", "fixed-3s", "fixed-4s", "fixed-5s", "tsap"]
    );
    for m in cfg.models() {
        assert_eq!(m.to_string().parse::<ModelSpec>().unwrap(), m);
    }
}
