use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::encoder::IntervalSpec;
use crate::numerics::{finite_diff_check, Tape};
use crate::seed;

fn small_config(layers: usize, heads: usize) -> PoptConfig {
    PoptConfig {
        h_dim: 4,
        d_model: 8,
        n_layers: layers,
        n_heads: heads,
        ff_dim: 12,
        coord_hidden: 6,
        ln_eps: 1e-5,
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_ensemble(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Ensemble {
    let coords = (0..n)
        .map(|_| {
            let v = gauss(rng, 3);
            [v[0], v[1], v[2]]
        })
        .collect();
    Ensemble::new((0..n as u32).collect(), coords, gauss(rng, n * h), h).unwrap()
}

fn example(rng: &mut ChaCha8Rng, n: usize, h: usize, consistent: bool) -> PretrainExample {
    let clean = random_ensemble(rng, n, h);
    let (ensemble, channel_labels) = if consistent {
        (clean, vec![false; n])
    } else {
        let mut donor = random_ensemble(rng, n, h);
        donor.coords = clean.coords.clone();
        corrupt(&clean, &donor, rng).unwrap()
    };
    PretrainExample {
        subject_id: 0,
        session_id: 0,
        interval: IntervalSpec::new(0.0, 1.0, 0.0),
        ensemble,
        cls_label: consistent,
        channel_labels,
    }
}

/// Perturbs every parameter so LayerNorm gains and biases are not trivial.
fn jitter(w: &mut PoptWeights, rng: &mut ChaCha8Rng, sd: f64) {
    for v in w.params.flat_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sd * z;
    }
}

#[test]
fn sequence_length_is_channels_plus_one() {
    let mut rng = seed::rng(1);
    let w = PoptWeights::init(&small_config(1, 2), 1).unwrap();
    let seq = assemble_tokens(&random_ensemble(&mut rng, 5, 4), &w).unwrap();
    assert_eq!(seq.len(), 6);
    assert_eq!(seq.tokens.row(0), w.params.by_name("cls").unwrap());
}

#[test]
fn coordinates_change_tokens() {
    let mut rng = seed::rng(2);
    let w = PoptWeights::init(&small_config(1, 2), 2).unwrap();
    let mut e = random_ensemble(&mut rng, 2, 4);
    let first = e.embedding(0).to_vec();
    e.embeddings[4..8].copy_from_slice(&first);
    let seq = assemble_tokens(&e, &w).unwrap();
    assert_ne!(seq.tokens.row(1), seq.tokens.row(2));

    let (cls_a, _) = popt_forward(&seq, &w).unwrap();
    e.coords[1][0] += 0.5;
    let (cls_b, _) = popt_forward(&assemble_tokens(&e, &w).unwrap(), &w).unwrap();
    let diff: f64 = cls_a.iter().zip(&cls_b).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(diff > 0.0);
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x [r, n] · w [n, m]`.
fn mm(x: &[f64], r: usize, n: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * m];
    for i in 0..r {
        for j in 0..m {
            out[i * m + j] = (0..n).map(|k| x[i * n + k] * w[k * m + j]).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % b.len()];
    }
}

fn ln(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = g.len();
    x.chunks(n)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            row.iter()
                .enumerate()
                .map(move |(c, v)| (v - mean) / (var + eps).sqrt() * g[c] + b[c])
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn single_channel_layer_matches_hand_computation() {
    let cfg = small_config(1, 1);
    let mut rng = seed::rng(3);
    let mut w = PoptWeights::init(&cfg, 3).unwrap();
    jitter(&mut w, &mut rng, 0.3);
    let e = random_ensemble(&mut rng, 1, cfg.h_dim);
    let p = |name: &str| w.params.by_name(name).unwrap().to_vec();
    let (d, f, c) = (cfg.d_model, cfg.ff_dim, cfg.coord_hidden);

    let mut proj = mm(&e.embeddings, 1, cfg.h_dim, &p("input_proj.w"), d);
    add_bias(&mut proj, &p("input_proj.b"));
    let mut hid = mm(&e.coords[0], 1, 3, &p("coord.w1"), c);
    add_bias(&mut hid, &p("coord.b1"));
    let hid: Vec<f64> = hid.into_iter().map(gelu).collect();
    let mut pos = mm(&hid, 1, c, &p("coord.w2"), d);
    add_bias(&mut pos, &p("coord.b2"));
    let mut x = p("cls");
    x.extend(proj.iter().zip(&pos).map(|(a, b)| a + b));

    let h = ln(&x, &p("layers.0.ln1.g"), &p("layers.0.ln1.b"), cfg.ln_eps);
    let q = mm(&h, 2, d, &p("layers.0.attn.wq"), d);
    let k = mm(&h, 2, d, &p("layers.0.attn.wk"), d);
    let v = mm(&h, 2, d, &p("layers.0.attn.wv"), d);
    let mut attn = vec![0.0; 2 * d];
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s[0].max(s[1]);
        let e0 = (s[0] - m).exp();
        let e1 = (s[1] - m).exp();
        for t in 0..d {
            attn[i * d + t] = (e0 * v[t] + e1 * v[d + t]) / (e0 + e1);
        }
    }
    let mut o = mm(&attn, 2, d, &p("layers.0.attn.wo"), d);
    add_bias(&mut o, &p("layers.0.attn.bo"));
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let h2 = ln(&x1, &p("layers.0.ln2.g"), &p("layers.0.ln2.b"), cfg.ln_eps);
    let mut ff = mm(&h2, 2, d, &p("layers.0.ff.w1"), f);
    add_bias(&mut ff, &p("layers.0.ff.b1"));
    let ff: Vec<f64> = ff.into_iter().map(gelu).collect();
    let mut ff = mm(&ff, 2, f, &p("layers.0.ff.w2"), d);
    add_bias(&mut ff, &p("layers.0.ff.b2"));
    let x2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
    let expected = ln(&x2, &p("final_ln.g"), &p("final_ln.b"), cfg.ln_eps);

    let (cls, chans) = popt_forward(&assemble_tokens(&e, &w).unwrap(), &w).unwrap();
    for t in 0..d {
        assert!((cls[t] - expected[t]).abs() < 1e-10, "cls[{t}]");
        assert!((chans.values()[t] - expected[d + t]).abs() < 1e-10, "chan[{t}]");
    }
}

#[test]
fn cls_invariant_and_channels_equivariant_under_permutation() {
    let cfg = small_config(2, 2);
    let mut rng = seed::rng(4);
    let mut w = PoptWeights::init(&cfg, 4).unwrap();
    jitter(&mut w, &mut rng, 0.1);
    let e = random_ensemble(&mut rng, 7, cfg.h_dim);
    let (cls, chans) = popt_forward(&assemble_tokens(&e, &w).unwrap(), &w).unwrap();
    let d = cfg.d_model;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let (cls_p, chans_p) = popt_forward(&assemble_tokens(&e.permuted(&perm), &w).unwrap(), &w).unwrap();
        for t in 0..d {
            assert!((cls[t] - cls_p[t]).abs() <= 1e-9);
        }
        for (i, &src) in perm.iter().enumerate() {
            for t in 0..d {
                assert!((chans_p.row(i)[t] - chans.row(src)[t]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn batched_forward_matches_single() {
    let cfg = small_config(2, 2);
    let mut rng = seed::rng(5);
    let w = PoptWeights::init(&cfg, 5).unwrap();
    let es: Vec<Ensemble> = (1..5).map(|n| random_ensemble(&mut rng, n, 4)).collect();
    let batched = cls_representations(&w, &es, 8).unwrap();
    for (e, b) in es.iter().zip(&batched) {
        let (single, _) = popt_forward(&assemble_tokens(e, &w).unwrap(), &w).unwrap();
        for (x, y) in single.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn zero_heads(w: &mut PoptWeights) {
    for name in ["cls_head.w", "cls_head.b", "chan_head.w", "chan_head.b"] {
        let i = w.params.index_of(name).unwrap();
        w.params.get_mut(i).fill(0.0);
    }
}

#[test]
fn uniform_predictions_give_two_ln_two() {
    let cfg = small_config(1, 2);
    let mut rng = seed::rng(6);
    let mut w = PoptWeights::init(&cfg, 6).unwrap();
    zero_heads(&mut w);
    let batch: Vec<_> = (0..6).map(|i| example(&mut rng, 3, 4, i % 2 == 0)).collect();
    let (loss, m) = pretrain_loss(&batch, &w).unwrap();
    assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!(m.channel_accuracy.is_some());
}

#[test]
fn saturated_correct_heads_give_near_zero_loss() {
    let cfg = small_config(1, 2);
    let mut rng = seed::rng(7);
    let mut w = PoptWeights::init(&cfg, 7).unwrap();
    zero_heads(&mut w);
    // All-consistent batch: a large positive CLS bias is a perfect predictor.
    let i = w.params.index_of("cls_head.b").unwrap();
    w.params.get_mut(i)[0] = 50.0;
    let batch: Vec<_> = (0..4).map(|_| example(&mut rng, 3, 4, true)).collect();
    let (loss, m) = pretrain_loss(&batch, &w).unwrap();
    assert!(loss < 1e-20);
    assert_eq!(m.cls_accuracy, 1.0);
    assert_eq!(m.channel_accuracy, None);
}

#[test]
fn label_inconsistency_is_rejected() {
    let cfg = small_config(1, 2);
    let mut rng = seed::rng(8);
    let w = PoptWeights::init(&cfg, 8).unwrap();
    let mut ex = example(&mut rng, 3, 4, true);
    ex.channel_labels[1] = true;
    assert!(matches!(pretrain_loss(&[ex.clone()], &w), Err(PoptError::Labels(_))));
    ex.channel_labels[1] = false;
    ex.cls_label = false;
    assert!(matches!(pretrain_loss(&[ex], &w), Err(PoptError::Labels(_))));
    assert!(matches!(pretrain_loss(&[], &w), Err(PoptError::EmptyBatch)));
}

#[test]
fn corruption_replaces_at_least_one_channel() {
    let mut rng = seed::rng(9);
    for _ in 0..200 {
        let ex = example(&mut rng, 2, 3, false);
        assert!(ex.channel_labels.iter().any(|&c| c));
        ex.validate().unwrap();
    }
}

#[test]
fn pretrain_loss_gradient_matches_finite_differences() {
    let cfg = small_config(1, 2);
    let mut rng = seed::rng(10);
    let mut w = PoptWeights::init(&cfg, 10).unwrap();
    jitter(&mut w, &mut rng, 0.2);
    let batch: Vec<_> = (0..3).map(|i| example(&mut rng, 3, 4, i == 0)).collect();
    let tensors: Vec<_> = (0..w.params.len()).map(|i| w.params.tensor(i)).collect();
    let worst = finite_diff_check(
        |tape: &mut Tape, vars| {
            let v = PoptVars::from_slice(&cfg, vars).map_err(|e| match e {
                PoptError::Numerics(n) => n,
                other => panic!("{other}"),
            })?;
            let (loss, _) = pretrain_loss_graph(tape, &v, &w, &batch).unwrap();
            Ok(loss)
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn decode_head_is_affine() {
    let mut rng = seed::rng(11);
    let x = gauss(&mut rng, 8);
    let mut head = DecodeHead::zeros(8);
    head.bias = 0.25;
    assert_eq!(decode_head(&x, &head).unwrap(), 0.25);
    head.weights[3] = 1.0;
    assert_eq!(decode_head(&x, &head).unwrap(), x[3] + 0.25);
    head.weights = gauss(&mut rng, 8);
    let dot: f64 = (0..8).map(|i| x[i] * head.weights[i]).sum();
    assert!((decode_head(&x, &head).unwrap() - dot - 0.25).abs() < 1e-12);
    assert!(decode_head(&x[..4], &head).is_err());
}

#[test]
fn checkpoint_metadata_round_trip_and_mismatch() {
    let cfg = small_config(1, 2);
    let w = PoptWeights::init(&cfg, 12).unwrap();
    let meta = w.metadata(&[1.0, 2.0]);
    let (back, lengths) = PoptWeights::from_checkpoint(w.params.clone(), &meta, Some(&cfg)).unwrap();
    assert_eq!(back, w);
    assert_eq!(lengths, vec![1.0, 2.0]);
    let other = small_config(2, 2);
    assert!(matches!(
        PoptWeights::from_checkpoint(w.params.clone(), &meta, Some(&other)),
        Err(PoptError::ConfigMismatch(_))
    ));
}

#[test]
fn errors_for_bad_inputs() {
    let cfg = small_config(1, 2);
    let w = PoptWeights::init(&cfg, 13).unwrap();
    assert!(matches!(
        Ensemble::new(vec![], vec![], vec![], 4),
        Err(PoptError::EmptyEnsemble)
    ));
    let wrong = Ensemble::new(vec![0], vec![[0.0; 3]], vec![0.0; 5], 5).unwrap();
    assert!(matches!(assemble_tokens(&wrong, &w), Err(PoptError::Dimension(_))));
    let mut rng = seed::rng(14);
    let mut bad = PoptConfig {
        n_heads: 3,
        ..cfg.clone()
    };
    assert!(PoptWeights::init(&bad, 0).is_err());
    bad.n_heads = rng.random_range(1..3) * 2;
    assert!(PoptWeights::init(&bad, 0).is_ok());
}
