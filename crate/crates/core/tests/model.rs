mod common;

use std::sync::Arc;

use camlmlab::corpus::{CLS, MASK, SEP};
use camlmlab::model::*;
use camlmlab::objectives::{MaskedBatch, Segment};
use camlmlab::tensor::{BoolMatrix, Tensor};
use camlmlab::Error;
use common::*;

fn manual_batch(tokens: &[u32], allowed: BoolMatrix, predict: &[usize]) -> MaskedBatch {
    let n = tokens.len();
    let labels = predict
        .iter()
        .map(|&p| if tokens[p] == MASK { 4 } else { tokens[p] })
        .collect();
    MaskedBatch {
        tokens: tokens.to_vec(),
        pos_ids: (0..n as u32).collect(),
        lang_ids: vec![0; n],
        segments: (0..n)
            .map(|i| {
                if tokens[i] < 4 {
                    Segment::Special
                } else {
                    Segment::Src
                }
            })
            .collect(),
        allowed: Arc::new(allowed),
        predict_positions: predict.to_vec(),
        labels: Some(labels),
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

#[test]
fn init_is_deterministic_and_well_formed() {
    let cfg = ModelConfig::default();
    let a = Params::<f32>::init(&cfg, 7).unwrap();
    let b = Params::<f32>::init(&cfg, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(
        a.checksum(),
        Params::<f32>::init(&cfg, 8).unwrap().checksum()
    );
    for (name, t) in a.names().iter().zip(a.weights.items()) {
        let mean = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / t.len() as f64;
        if name.ends_with("_gain") {
            assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
        } else {
            assert!(mean.abs() < 0.01, "{name} mean {mean}");
        }
        if name.ends_with("_bias") || name.ends_with(".bq") || name.ends_with(".b1") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
}

#[test]
fn zero_layers_logits_are_direct_dot_products() {
    let cfg = tiny_config(0);
    let p = random_params(&cfg, 3, 0.5);
    let b = tiny_builder()
        .mmlm_with(
            &sent(&[4, 5, 6, 7], 0),
            camlmlab::objectives::explicit_masking(&[4, 5, 6, 7], &[1, 3]).unwrap(),
        )
        .unwrap();
    let out = forward(&p, &b).unwrap();
    let w = &p.weights;
    let h = cfg.hidden;
    for (r, &pos) in b.predict_positions.iter().enumerate() {
        let emb: Vec<f64> = (0..h)
            .map(|j| {
                w.tok_emb.at(b.tokens[pos] as usize, j)
                    + w.pos_emb.at(b.pos_ids[pos] as usize, j)
                    + w.lang_emb.at(b.lang_ids[pos] as usize, j)
            })
            .collect();
        let z = layer_norm(&emb, w.final_ln_gain.data(), w.final_ln_bias.data());
        for v in 0..cfg.vocab {
            let dot: f64 =
                (0..h).map(|j| z[j] * w.tok_emb.at(v, j)).sum::<f64>() + w.out_bias.data()[v];
            assert!((out.logits.at(r, v) - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_pure() {
    let cfg = tiny_config(2);
    let p = random_params(&cfg, 4, 0.3);
    let b = tiny_builder()
        .camlm_with_masks(
            &figure_pair(),
            &[1],
            &[1, 2],
            camlmlab::objectives::MaskMode::Strict,
        )
        .unwrap();
    let a = forward(&p, &b).unwrap();
    let c = forward(&p, &b).unwrap();
    assert_eq!(a, c);
    assert_eq!(a.hidden.len(), 3);
    assert_eq!(a.logits.shape(), &[3, V]);
}

#[test]
fn invisible_segment_edits_do_not_reach_logits() {
    let cfg = tiny_config(2);
    let p = random_params(&cfg, 5, 0.3);
    // Rows 0..4 and 4..8 never see each other.
    let allowed = BoolMatrix::from_fn(8, |i, j| (i < 4) == (j < 4));
    let base = manual_batch(&[CLS, MASK, 5, 6, 7, 8, 9, SEP], allowed.clone(), &[1]);
    let before = forward(&p, &base).unwrap();
    for pos in 4..8 {
        for t in 0..V as u32 {
            let mut toks = base.tokens.clone();
            toks[pos] = t;
            let edited = manual_batch(&toks, allowed.clone(), &[1]);
            let after = forward(&p, &edited).unwrap();
            assert_eq!(before.logits, after.logits, "edit at {pos} to {t}");
        }
    }
}

#[test]
fn full_visibility_is_permutation_symmetric_without_positions() {
    let cfg = tiny_config(2);
    let mut p = random_params(&cfg, 6, 0.3);
    p.weights.pos_emb = Tensor::zeros(p.weights.pos_emb.shape());
    let toks = [CLS, 5, MASK, 7, 8, 9, SEP];
    let perm = [SEP, 9, MASK, 8, 5, 7, CLS];
    let a = forward(&p, &manual_batch(&toks, BoolMatrix::ones(7), &[2])).unwrap();
    let b = forward(&p, &manual_batch(&perm, BoolMatrix::ones(7), &[2])).unwrap();
    for v in 0..V {
        assert!((a.logits.at(0, v) - b.logits.at(0, v)).abs() < 1e-12);
    }
}

#[test]
fn pooling_examples() {
    let cfg = tiny_config(2);
    let mut p = random_params(&cfg, 7, 0.3);
    let mid = cfg.middle_layer();
    assert_eq!(mid, 1);

    let single = MaskedBatch::plain(&sent(&[6], 0), 24).unwrap();
    let pooled = pool_middle_layer(&p, &single).unwrap();
    let out = forward(&p, &single).unwrap();
    assert_eq!(pooled, out.hidden[mid].row(1));

    let random = MaskedBatch::plain(&sent(&[4, 9, 9, 5, 10], 1), 24).unwrap();
    let pooled = pool_middle_layer(&p, &random).unwrap();
    let out = forward(&p, &random).unwrap();
    for (j, &got) in pooled.iter().enumerate() {
        let mean = (1..6).map(|i| out.hidden[mid].at(i, j)).sum::<f64>() / 5.0;
        assert!((got - mean).abs() < 1e-12);
    }

    p.weights.pos_emb = Tensor::zeros(p.weights.pos_emb.shape());
    let twin = MaskedBatch::plain(&sent(&[8, 8], 0), 24).unwrap();
    let pooled = pool_middle_layer(&p, &twin).unwrap();
    let out = forward(&p, &twin).unwrap();
    for (j, &got) in pooled.iter().enumerate() {
        assert!((got - out.hidden[mid].at(1, j)).abs() < 1e-12);
        assert!((got - out.hidden[mid].at(2, j)).abs() < 1e-12);
    }

    let many = pool_many(&p, &[sent(&[6], 0), sent(&[4, 9, 9, 5, 10], 1)]).unwrap();
    assert_eq!(
        many[0],
        pool_middle_layer(&p, &MaskedBatch::plain(&sent(&[6], 0), 24).unwrap()).unwrap()
    );
}

#[test]
fn pooling_without_content_is_an_error() {
    let cfg = tiny_config(1);
    let p = random_params(&cfg, 8, 0.3);
    let b = manual_batch(&[CLS, SEP], BoolMatrix::ones(2), &[]);
    assert!(pool_middle_layer(&p, &b).is_err());
}

#[test]
fn out_of_range_ids_are_rejected() {
    let cfg = tiny_config(1);
    let p = random_params(&cfg, 9, 0.3);
    let mut b = manual_batch(&[CLS, 5, SEP], BoolMatrix::ones(3), &[1]);
    b.tokens[1] = V as u32;
    assert!(matches!(forward(&p, &b), Err(Error::IdOutOfRange(_))));
    let mut b = manual_batch(&[CLS, 5, SEP], BoolMatrix::ones(3), &[1]);
    b.lang_ids[0] = 2;
    assert!(matches!(forward(&p, &b), Err(Error::IdOutOfRange(_))));
    let mut b = manual_batch(&[CLS, 5, SEP], BoolMatrix::ones(3), &[1]);
    b.pos_ids[2] = 24;
    assert!(matches!(forward(&p, &b), Err(Error::Overflow { .. })));
}

#[test]
fn empty_attention_row_is_degenerate() {
    let cfg = tiny_config(1);
    let p = random_params(&cfg, 10, 0.3);
    let mut m = BoolMatrix::ones(3);
    for j in 0..3 {
        m.set(1, j, false);
    }
    let b = manual_batch(&[CLS, 5, SEP], m, &[1]);
    assert!(matches!(
        forward(&p, &b),
        Err(Error::DegenerateRow { row: 1 })
    ));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let worst = (0..20u64)
        .map(encoder_gradient_error)
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::default();
    let p = Params::<f32>::init(&cfg, 11).unwrap();
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("p.ckpt");
    p.save(&path).unwrap();
    let q = Params::<f32>::load(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.checksum(), q.checksum());
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(CHECKPOINT_MAGIC));
}

#[test]
fn corrupted_checkpoints_are_detected() {
    let cfg = tiny_config(1);
    let p = Params::<f32>::init(&cfg, 12).unwrap();
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("p.ckpt");
    p.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = d.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        read_checkpoint(&truncated),
        Err(Error::Checkpoint { .. })
    ));

    let trailing = d.path().join("long.ckpt");
    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&trailing, &long).unwrap();
    assert!(matches!(
        read_checkpoint(&trailing),
        Err(Error::Checkpoint { .. })
    ));

    let magic = d.path().join("magic.ckpt");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&magic, &bad).unwrap();
    assert!(matches!(
        read_checkpoint(&magic),
        Err(Error::Checkpoint { .. })
    ));

    let other = tiny_config(2);
    let q = Params::<f32>::init(&other, 12).unwrap();
    let path2 = d.path().join("q.ckpt");
    q.save(&path2).unwrap();
    let ck = read_checkpoint(&path2).unwrap();
    assert_eq!(ck.model, other);
}

#[test]
fn f64_params_survive_f32_checkpoints_within_rounding() {
    let cfg = tiny_config(1);
    let p = random_params(&cfg, 13, 0.3);
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("p.ckpt");
    p.save(&path).unwrap();
    let q = Params::<f64>::load(&path).unwrap();
    assert_eq!(q, p.cast::<f32>().cast::<f64>());
}
