mod common;

use camlmlab::corpus::{MonoSentence, Vocabulary, MASK};
use camlmlab::model::{forward, Params};
use camlmlab::objectives::*;
use common::masks::*;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn figure_mode_rows_match_the_worked_example() {
    let b = figure_batch(MaskMode::Figure);
    let labels = pair_labels(3, 4);
    assert_eq!(labelled_row(&b.allowed, &labels, 2), set(&[2, 4, 5, 6, 7]));
    assert_eq!(labelled_row(&b.allowed, &labels, 5), set(&[1, 2, 3, 5]));
    assert_eq!(labelled_row(&b.allowed, &labels, 6), set(&[1, 2, 3, 6]));
}

#[test]
fn strict_mode_rows_match_the_factorization() {
    let b = figure_batch(MaskMode::Strict);
    let labels = pair_labels(3, 4);
    assert_eq!(labelled_row(&b.allowed, &labels, 2), set(&[2, 4, 7]));
    assert_eq!(labelled_row(&b.allowed, &labels, 5), set(&[1, 3, 5]));
    assert_eq!(labelled_row(&b.allowed, &labels, 1), set(&[1, 3]));
    assert_eq!(labelled_row(&b.allowed, &labels, 4), set(&[4, 7]));
}

#[test]
fn tlm_predicts_exactly_the_masked_slots() {
    let b = tiny_builder()
        .tlm_with_masks(&figure_pair(), &[1], &[1, 2])
        .unwrap();
    let labels = pair_labels(3, 4);
    let predicted: Vec<usize> = b
        .predict_positions
        .iter()
        .map(|&p| labels[p].unwrap())
        .collect();
    assert_eq!(predicted, vec![2, 5, 6]);
    assert!(b.allowed.is_all_true());
    assert_eq!(b.labels, Some(vec![5, 8, 9]));
    assert!(b.predict_positions.iter().all(|&p| b.tokens[p] == MASK));
}

#[test]
fn stage1_rows_match_the_worked_example() {
    let b = BatchBuilder::new(Vocabulary::new(2, 20).unwrap(), 24)
        .btmlm_stage1(&sent(&[4, 5, 6, 7], 0), 3, 1)
        .unwrap();
    // [CLS] x1..x4 [SEP] M5 M6 M7
    let labels: Vec<Option<usize>> = vec![
        None,
        Some(1),
        Some(2),
        Some(3),
        Some(4),
        None,
        Some(5),
        Some(6),
        Some(7),
    ];
    for row in 1..=4 {
        assert_eq!(
            labelled_row(&b.allowed, &labels, row),
            set(&[1, 2, 3, 4]),
            "row {row}"
        );
    }
    for row in 5..=7 {
        assert_eq!(
            labelled_row(&b.allowed, &labels, row),
            set(&[1, 2, 3, 4, row]),
            "row {row}"
        );
    }
    let pseudo = b.positions_of(Segment::Pseudo);
    assert_eq!(pseudo, b.predict_positions);
    assert!(pseudo
        .iter()
        .all(|&p| b.tokens[p] == MASK && b.lang_ids[p] == 1));
    assert_eq!(b.pos_ids, (0..9).collect::<Vec<u32>>());
    assert!(b.labels.is_none());
}

#[test]
fn strict_mode_blocks_leaks_through_four_layers() {
    let builder = BatchBuilder::new(Vocabulary::new(2, 20).unwrap(), 64);
    let pair = camlmlab::corpus::SentencePair {
        src: sent(&[4, 5, 6, 7, 8], 0),
        tgt: sent(&[24, 25, 26, 27, 28, 29], 1),
        aligned: true,
    };
    let mask_sets: [(&[usize], &[usize]); 4] = [
        (&[1], &[1, 2]),
        (&[0, 4], &[5]),
        (&[2], &[0, 1, 2, 3]),
        (&[0, 1, 2, 3], &[3]),
    ];
    for (ms, mt) in mask_sets {
        let b = builder
            .camlm_with_masks(&pair, ms, mt, MaskMode::Strict)
            .unwrap();
        for layers in 1..=4 {
            for &i in &b.predict_positions {
                let r = reachable(&b.allowed, i, layers);
                assert!(
                    r.is_subset(&permitted(&b, i)),
                    "row {i} at depth {layers} reaches {r:?}"
                );
            }
        }
    }
}

#[test]
fn figure_mode_leaks_at_depth_two() {
    let b = figure_batch(MaskMode::Figure);
    let x2 = 2;
    assert!(!reachable(&b.allowed, x2, 2).is_subset(&permitted(&b, x2)));
}

#[test]
fn every_predicted_row_sees_itself() {
    for mode in [MaskMode::Strict, MaskMode::Figure] {
        let b = figure_batch(mode);
        assert!(b.predict_positions.iter().all(|&p| b.allowed.get(p, p)));
    }
}

#[test]
fn camlm_is_leak_free_and_tlm_is_not() {
    let (n, _) = masks::camlm_leak_check(2, 11).unwrap();
    assert_eq!(n, figure_batch(MaskMode::Strict).len() * (V - 1));
}

#[test]
fn golden_rows_and_exhaustive_reachability() {
    masks::golden_rows_check().unwrap();
    assert!(masks::strict_reachability_check(4).unwrap() > 100);
}

#[test]
fn stage1_placeholders_are_independent() {
    masks::stage1_independence_check(3).unwrap();
}

#[test]
fn stage1_placeholders_do_not_feed_back() {
    let params = random_params(&tiny_config(2), 4, 0.4);
    let base = tiny_builder()
        .btmlm_stage1(&sent(&[4, 5, 6, 7], 0), 3, 0)
        .unwrap();
    let source = base.len() - 3;
    let h0 = forward(&params, &base).unwrap().hidden;
    for p in base.predict_positions.clone() {
        for t in 0..V as u32 {
            let mut b = base.clone();
            b.tokens[p] = t;
            let h = forward(&params, &b).unwrap().hidden;
            for (a, z) in h.iter().zip(&h0) {
                for i in 0..source {
                    let same = a
                        .row(i)
                        .iter()
                        .zip(z.row(i))
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                    assert!(same, "placeholder {p} token {t} reached source row {i}");
                }
            }
        }
    }
}

#[test]
fn stage2_layout() {
    let b = tiny_builder();
    let s = sent(&[4, 5, 6, 7, 8], 0);
    let c = explicit_masking(&s.tokens, &[0, 3]).unwrap();
    let batch = b.btmlm_stage2_with(&s, c, &[9, 10], 0).unwrap();
    let pseudo = batch.positions_of(Segment::Pseudo);
    assert_eq!(pseudo, vec![7, 8]);
    assert!(batch.predict_positions.iter().all(|p| !pseudo.contains(p)));
    assert_eq!(batch.labels, Some(vec![4, 7]));
    assert!(batch.allowed.is_all_true());
    assert_eq!(batch.len(), 10);
    assert!(b
        .btmlm_stage2_with(&s, explicit_masking(&s.tokens, &[0]).unwrap(), &[], 0)
        .is_err());
}

#[test]
fn mmlm_layout() {
    let b = tiny_builder();
    let s = sent(&[4, 5, 6, 7, 8, 9], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = b.mmlm(&s, &MaskingPolicy::default(), &mut rng).unwrap();
    assert_eq!(batch.len(), s.tokens.len() + 2);
    assert!(batch.allowed.is_all_true());
    let labels = batch.labels.clone().unwrap();
    for (p, l) in batch.predict_positions.iter().zip(labels) {
        assert_eq!(s.tokens[p - 1], l);
    }
}

#[test]
fn overflow_is_reported() {
    let b = BatchBuilder::new(Vocabulary::new(1, 7).unwrap(), 6);
    let s = sent(&[4, 5, 6, 7, 8], 0);
    let err = b
        .mmlm_with(&s, explicit_masking(&s.tokens, &[0]).unwrap())
        .unwrap_err();
    assert!(matches!(err, camlmlab::Error::Overflow { len: 7, max: 6 }));
}

#[test]
fn masking_rate_matches_over_many_positions() {
    let v = Vocabulary::new(1, 200).unwrap();
    let tokens: Vec<u32> = (0..20).map(|i| v.range(0).start + i).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let policy = MaskingPolicy::default();
    let draws = 100_000;
    let mut hits = vec![0usize; tokens.len()];
    let mut kinds = [0usize; 3];
    for _ in 0..draws {
        let c = apply_masking(&tokens, &v, &policy, &mut rng);
        for (&p, &l) in c.positions.iter().zip(&c.labels) {
            assert_eq!(tokens[p], l);
            hits[p] += 1;
            let k = if c.tokens[p] == MASK {
                0
            } else if c.tokens[p] == l {
                2
            } else {
                1
            };
            kinds[k] += 1;
        }
    }
    for (p, &h) in hits.iter().enumerate() {
        let rate = h as f64 / draws as f64;
        assert!((rate - 0.15).abs() <= 0.005, "position {p} rate {rate}");
    }
    let selected: usize = kinds.iter().sum();
    let share = |k: usize| kinds[k] as f64 / selected as f64;
    assert!((share(0) - 0.8).abs() < 0.01, "mask share {}", share(0));
    // A random replacement can redraw the original token.
    assert!((share(1) + share(2) - 0.2).abs() < 0.01);
}

#[test]
fn specials_are_never_selected() {
    let v = Vocabulary::new(1, 20).unwrap();
    let mut tokens: Vec<u32> = (4..14).collect();
    tokens.insert(0, camlmlab::corpus::CLS);
    tokens.push(camlmlab::corpus::SEP);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let c = apply_masking(&tokens, &v, &MaskingPolicy::mask_only(0.5), &mut rng);
        assert!(c.positions.iter().all(|&p| p != 0 && p != tokens.len() - 1));
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = tiny_config(1);
    let mut p = Params::<f64>::init(&cfg, 1).unwrap();
    for t in p.weights.items_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let b = tiny_builder()
        .mmlm_with(
            &sent(&[4, 5, 6], 0),
            explicit_masking(&[4, 5, 6], &[1]).unwrap(),
        )
        .unwrap();
    let loss = objective_loss(&p, &b).unwrap();
    assert!((loss - (V as f64).ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn loss_equals_cross_entropy_of_the_logits() {
    let p = random_params(&tiny_config(2), 8, 0.3);
    let b = figure_batch(MaskMode::Strict);
    let logits = logits_at(&p, &b);
    let labels = b.labels.clone().unwrap();
    let expected: f64 = logits
        .iter()
        .zip(&labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum::<f64>()
        / labels.len() as f64;
    assert!((objective_loss(&p, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn generation_is_deterministic_and_restricted() {
    let builder = BatchBuilder::new(Vocabulary::new(2, 3).unwrap(), 24);
    let vocab = builder.vocab;
    let cfg = camlmlab::model::ModelConfig {
        vocab: vocab.size(),
        ..tiny_config(2)
    };
    let params = random_params(&cfg, 5, 0.5);
    let s = MonoSentence {
        tokens: vec![4, 5, 6, 4],
        lang: 0,
    };
    let b = builder.btmlm_stage1(&s, 3, 1).unwrap();
    let a = generate_pseudo_tokens(&params, &b, PseudoDecode::Argmax, Some(&vocab)).unwrap();
    let again = generate_pseudo_tokens(&params, &b, PseudoDecode::Argmax, Some(&vocab)).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|t| vocab.range(1).contains(t)));
}

#[test]
fn rigged_logits_force_the_generated_tokens() {
    let cfg = tiny_config(0);
    let mut p = Params::<f64>::init(&cfg, 1).unwrap();
    // With no blocks the output bias alone decides the argmax.
    p.weights
        .tok_emb
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = 0.0);
    p.weights.out_bias.data_mut()[9] = 5.0;
    let b = tiny_builder()
        .btmlm_stage1(&sent(&[4, 5], 0), 2, 0)
        .unwrap();
    assert_eq!(
        generate_pseudo_tokens(&p, &b, PseudoDecode::Argmax, None).unwrap(),
        vec![9, 9]
    );
}

#[test]
fn builders_are_deterministic_in_seed() {
    let b = tiny_builder();
    let pair = figure_pair();
    let policy = MaskingPolicy::default();
    let make = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        b.camlm(&pair, &policy, MaskMode::Strict, &mut rng).unwrap()
    };
    assert_eq!(make(3), make(3));
}

proptest! {
    #[test]
    fn strict_masks_satisfy_the_reachability_oracle(
        src in 1usize..7,
        tgt in 1usize..7,
        ms_bits in any::<u8>(),
        mt_bits in any::<u8>(),
    ) {
        let builder = BatchBuilder::new(Vocabulary::new(2, 20).unwrap(), 64);
        let pair = camlmlab::corpus::SentencePair {
            src: sent(&(4..4 + src as u32).collect::<Vec<_>>(), 0),
            tgt: sent(&(24..24 + tgt as u32).collect::<Vec<_>>(), 1),
            aligned: true,
        };
        let pick = |bits: u8, n: usize| -> Vec<usize> {
            let v: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
            if v.is_empty() { vec![bits as usize % n] } else { v }
        };
        let (ms, mt) = (pick(ms_bits, src), pick(mt_bits, tgt));
        let b = builder.camlm_with_masks(&pair, &ms, &mt, MaskMode::Strict).unwrap();
        prop_assert!(b.allowed.first_empty_row().is_none());
        for &i in &b.predict_positions {
            prop_assert!(reachable(&b.allowed, i, 4).is_subset(&permitted(&b, i)));
        }
    }
}
