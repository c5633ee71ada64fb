#![allow(dead_code)]

pub mod masks;

use camlmlab::corpus::{MonoSentence, SentencePair, Vocabulary};
use camlmlab::model::{ModelConfig, Params};
use camlmlab::objectives::BatchBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Eleven ids: four specials and seven content tokens.
pub const V: usize = 11;

pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab: V,
        langs: 2,
        max_positions: 24,
        dropout: 0.0,
    }
}

pub fn tiny_builder() -> BatchBuilder {
    BatchBuilder::new(Vocabulary::new(1, 7).unwrap(), 24)
}

/// Weights drawn with a large spread so gradients are far from zero.
pub fn random_params(cfg: &ModelConfig, seed: u64, sigma: f64) -> Params<f64> {
    let mut p = Params::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let noise = Normal::new(0.0, sigma).unwrap();
    for (name, t) in p.weights.names().into_iter().zip(p.weights.items_mut()) {
        let base = if name.ends_with("_gain") { 1.0 } else { 0.0 };
        for x in t.data_mut() {
            *x = base + noise.sample(&mut rng);
        }
    }
    p
}

pub fn sent(tokens: &[u32], lang: u16) -> MonoSentence {
    MonoSentence {
        tokens: tokens.to_vec(),
        lang,
    }
}

/// Source `x1 x2 x3`, target `y4 y5 y6 y7`, in a seven-token vocabulary.
pub fn figure_pair() -> SentencePair {
    SentencePair {
        src: sent(&[4, 5, 6], 0),
        tgt: sent(&[7, 8, 9, 10], 1),
        aligned: true,
    }
}

/// A corpus and model small enough for multi-step training in tests.
pub fn small_lab() -> (
    ModelConfig,
    camlmlab::trainer::TrainConfig,
    camlmlab::corpus::Corpora,
) {
    let corpus = camlmlab::corpus::CorpusConfig {
        tokens_per_lang: 20,
        parallel_pairs: 120,
        mono_per_lang: 120,
        heldout_pairs: 16,
        length_min: 4,
        length_max: 8,
        seed: 21,
        ..Default::default()
    };
    let corpora = camlmlab::corpus::Corpora::generate(&corpus).unwrap();
    let model = ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab: corpora.vocab().size(),
        langs: 2,
        max_positions: 24,
        dropout: 0.0,
    };
    let train = camlmlab::trainer::TrainConfig {
        total_steps: 40,
        warmup_steps: 4,
        batch_size: 4,
        peak_lr: 1e-3,
        checkpoint_every: 20,
        seed: 5,
        ..Default::default()
    };
    (model, train, corpora)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> camlmlab::Tensor64 {
    use rand::Rng;
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    camlmlab::tensor::Tensor::from_f64(shape, &v).unwrap()
}

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output element contributes a distinct gradient.
fn project(
    g: &mut camlmlab::tensor::Graph<f64>,
    out: camlmlab::tensor::Var,
) -> camlmlab::Result<camlmlab::tensor::Var> {
    let shape = g.value(out).shape().to_vec();
    let w = uniform(&shape, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let w = g.constant(w);
    let y = g.mul(out, w)?;
    g.sum(y)
}

/// Worst finite-difference relative error of every differentiable graph op
/// for one random draw.
type OpFn = dyn Fn(
    &mut camlmlab::tensor::Graph<f64>,
    &[camlmlab::tensor::Var],
) -> camlmlab::Result<camlmlab::tensor::Var>;

pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use camlmlab::tensor::{finite_diff_check_multi as fd, AttentionSegment, BoolMatrix};
    use std::sync::Arc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| uniform(s, &mut rng);
    let h = 1e-5;
    let mask = Arc::new(BoolMatrix::from_fn(4, |i, j| {
        i == j || !(i + j + seed as usize).is_multiple_of(3)
    }));
    let seg_a = Arc::new(BoolMatrix::from_fn(3, |i, j| j <= i));
    let seg_b = Arc::new(BoolMatrix::from_fn(3, |i, j| i == j || j == 0));
    let segments = vec![
        AttentionSegment {
            offset: 0,
            allowed: seg_a,
        },
        AttentionSegment {
            offset: 3,
            allowed: seg_b,
        },
    ];
    let mut out = Vec::new();
    let mut run = |name, f: &OpFn, inputs: Vec<camlmlab::Tensor64>| {
        out.push((name, fd(f, &inputs, h).unwrap()));
    };

    run(
        "matmul",
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        },
        vec![r(&[3, 4]), r(&[4, 2])],
    );
    run(
        "matmul_nt",
        &|g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y)
        },
        vec![r(&[3, 4]), r(&[2, 4])],
    );
    run(
        "add",
        &|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        },
        vec![r(&[3, 2]), r(&[3, 2])],
    );
    run(
        "add_row",
        &|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y)
        },
        vec![r(&[3, 4]), r(&[4])],
    );
    run(
        "mul",
        &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        },
        vec![r(&[3, 2]), r(&[3, 2])],
    );
    run(
        "scale",
        &|g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y)
        },
        vec![r(&[2, 3])],
    );
    run(
        "sum",
        &|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        },
        vec![r(&[2, 3])],
    );
    run(
        "gelu",
        &|g, v| {
            let y = g.gelu(v[0])?;
            project(g, y)
        },
        vec![r(&[3, 3])],
    );
    run(
        "layer_norm",
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y)
        },
        vec![r(&[3, 5]), r(&[5]), r(&[5])],
    );
    run(
        "embedding",
        &|g, v| {
            let y = g.embedding(v[0], &[2, 0, 2, 4])?;
            project(g, y)
        },
        vec![r(&[5, 3])],
    );
    run(
        "gather_rows",
        &|g, v| {
            let y = g.gather_rows(v[0], &[3, 1, 1])?;
            project(g, y)
        },
        vec![r(&[4, 3])],
    );
    run(
        "group_mean",
        &|g, v| {
            let y = g.group_mean(v[0], &[vec![0, 1, 2], vec![3], vec![1, 4]])?;
            project(g, y)
        },
        vec![r(&[5, 3])],
    );
    let m = mask.clone();
    run(
        "masked_softmax",
        &move |g, v| {
            let y = g.masked_softmax(v[0], m.clone())?;
            project(g, y)
        },
        vec![r(&[4, 4])],
    );
    let s = segments.clone();
    run(
        "attention",
        &move |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, s.clone())?;
            project(g, y)
        },
        vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])],
    );
    run(
        "cross_entropy",
        &|g, v| g.cross_entropy(v[0], &[1, 4, 0]),
        vec![r(&[3, 5])],
    );
    run(
        "dropout",
        &move |g, v| {
            let y = g.dropout(v[0], 0.3, seed)?;
            project(g, y)
        },
        vec![r(&[4, 4])],
    );
    run(
        "l2_normalize_rows",
        &|g, v| {
            let y = g.l2_normalize_rows(v[0])?;
            project(g, y)
        },
        vec![r(&[3, 4])],
    );
    run(
        "hardest_negative_bce",
        &|g, v| g.hardest_negative_bce(v[0], 0.5),
        vec![r(&[4, 4])],
    );
    out
}

/// Finite-difference relative error of the full 1-layer encoder NLL with
/// respect to every parameter, over a TLM, CAMLM or Stage-2 batch.
pub fn encoder_gradient_error(seed: u64) -> f64 {
    use camlmlab::model::ParamSet;
    use camlmlab::objectives::{explicit_masking, packed_loss, MaskMode};

    let cfg = tiny_config(1);
    let builder = tiny_builder();
    let pair = SentencePair {
        src: sent(&[4, 5], 0),
        tgt: sent(&[6, 7, 8], 1),
        aligned: true,
    };
    let p = random_params(&cfg, 100 + seed, 0.4);
    let b = match seed % 3 {
        0 => builder.tlm_with_masks(&pair, &[0], &[1, 2]).unwrap(),
        1 => builder
            .camlm_with_masks(&pair, &[1], &[0], MaskMode::Strict)
            .unwrap(),
        _ => builder
            .btmlm_stage2_with(
                &sent(&[4, 5, 6, 7], 0),
                explicit_masking(&[4, 5, 6, 7], &[0, 2]).unwrap(),
                &[9],
                1,
            )
            .unwrap(),
    };
    let inputs: Vec<camlmlab::Tensor64> = p.weights.items().into_iter().cloned().collect();
    camlmlab::tensor::finite_diff_check_multi(
        |g, vars| {
            let w = ParamSet::from_items(cfg.layers, vars.to_vec()).unwrap();
            packed_loss(g, &cfg, &w, &[&b], None)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}
