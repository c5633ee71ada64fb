//! Batch construction and losses for the four pretraining objectives.

mod batch;
mod mask;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batch::{
    apply_masking, explicit_masking, pseudo_count, BatchBuilder, Corruption, MaskedBatch,
    MaskingPolicy, Segment,
};
pub use mask::{btmlm_stage1_mask, camlm_attention_mask, MaskMode};

use crate::corpus::{LangId, MonoSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{encode, EncodeOptions, ModelConfig, ParamSet, Params};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mmlm,
    Tlm,
    Camlm,
    Btmlm,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [Self::Mmlm, Self::Tlm, Self::Camlm, Self::Btmlm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mmlm => "mmlm",
            Self::Tlm => "tlm",
            Self::Camlm => "camlm",
            Self::Btmlm => "btmlm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean NLL over the prediction positions of all `batches`, packed into one
/// forward pass on `g`.
pub fn packed_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &ParamSet<Var>,
    batches: &[&MaskedBatch],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let mut labels = Vec::new();
    for b in batches {
        let l = b
            .labels
            .as_ref()
            .ok_or_else(|| Error::Invalid("loss needs a batch with labels".into()))?;
        labels.extend(l.iter().map(|&t| t as usize));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("no prediction positions".into()));
    }
    let vars = encode(
        g,
        cfg,
        w,
        batches,
        EncodeOptions {
            dropout_seed,
            logits: true,
        },
    )?;
    g.cross_entropy(vars.logits.expect("predictions present"), &labels)
}

/// Mean NLL at the batch's prediction positions, without recording gradients.
pub fn objective_loss<T: Scalar>(params: &Params<T>, batch: &MaskedBatch) -> Result<T> {
    objective_loss_many(params, &[batch])
}

pub fn objective_loss_many<T: Scalar>(params: &Params<T>, batches: &[&MaskedBatch]) -> Result<T> {
    let mut g = Graph::inference();
    let w = params.attach(&mut g, false);
    let loss = packed_loss(&mut g, &params.config, &w, batches, None)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PseudoDecode {
    Argmax,
    Sample { temperature: f64, seed: u64 },
}

/// Stage-1 decoding: one forward pass over the placeholders. With `restrict`,
/// each placeholder's choice is limited to its language's token range.
pub fn generate_pseudo_tokens<T: Scalar>(
    params: &Params<T>,
    batch: &MaskedBatch,
    decode: PseudoDecode,
    restrict: Option<&Vocabulary>,
) -> Result<Vec<u32>> {
    Ok(
        generate_pseudo_tokens_many(params, &[batch], decode, restrict)?
            .pop()
            .unwrap(),
    )
}

pub fn generate_pseudo_tokens_many<T: Scalar>(
    params: &Params<T>,
    batches: &[&MaskedBatch],
    decode: PseudoDecode,
    restrict: Option<&Vocabulary>,
) -> Result<Vec<Vec<u32>>> {
    let outputs = crate::model::forward_many(params, batches)?;
    let mut rng = match decode {
        PseudoDecode::Sample { seed, .. } => Some(crate::seed::rng(seed, &[0x5eed])),
        PseudoDecode::Argmax => None,
    };
    let mut all = Vec::with_capacity(batches.len());
    for (b, out) in batches.iter().zip(&outputs) {
        let mut picks = Vec::with_capacity(b.predict_positions.len());
        for (r, &pos) in b.predict_positions.iter().enumerate() {
            let row = out.logits.row(r);
            let range = match restrict {
                Some(v) => {
                    let rg = v.range(b.lang_ids[pos]);
                    rg.start as usize..rg.end as usize
                }
                None => 0..row.len(),
            };
            let slice = &row[range.clone()];
            let k = match (decode, rng.as_mut()) {
                (PseudoDecode::Sample { temperature, .. }, Some(rng)) => {
                    sample_index(slice, temperature, rng)
                }
                _ => argmax(slice),
            };
            picks.push((range.start + k) as u32);
        }
        all.push(picks);
    }
    Ok(all)
}

/// Index of the largest value; lowest index on ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<T: Scalar, R: Rng>(logits: &[T], temperature: f64, rng: &mut R) -> usize {
    let t = temperature.max(1e-6);
    let m = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|x| ((x.as_f64() - m) / t).exp())
        .collect();
    let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Options for turning monolingual sentences into Stage-2 batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtmlmOptions {
    pub pseudo_prob: f64,
    pub restrict_decoding: bool,
    pub decode: PseudoDecode,
}

impl Default for BtmlmOptions {
    fn default() -> Self {
        Self {
            pseudo_prob: 0.15,
            restrict_decoding: true,
            decode: PseudoDecode::Argmax,
        }
    }
}

/// Uniform choice among languages other than `lang`.
pub fn pick_target_lang<R: Rng>(lang: LangId, num_langs: usize, rng: &mut R) -> Result<LangId> {
    if num_langs < 2 {
        return Err(Error::Config(
            "back-translation needs at least two languages".into(),
        ));
    }
    let k = rng.gen_range(0..num_langs - 1) as LangId;
    Ok(if k >= lang { k + 1 } else { k })
}

/// Runs Stage 1 with the current parameters (no gradient) and builds the
/// Stage-2 batches.
pub fn btmlm_batches<T: Scalar, R: Rng>(
    params: &Params<T>,
    builder: &BatchBuilder,
    sentences: &[MonoSentence],
    policy: &MaskingPolicy,
    opts: &BtmlmOptions,
    rng: &mut R,
) -> Result<Vec<MaskedBatch>> {
    let mut targets = Vec::with_capacity(sentences.len());
    let mut stage1 = Vec::with_capacity(sentences.len());
    for s in sentences {
        let tgt = pick_target_lang(s.lang, builder.vocab.num_langs(), rng)?;
        let p = pseudo_count(s.tokens.len(), opts.pseudo_prob);
        stage1.push(builder.btmlm_stage1(s, p, tgt)?);
        targets.push(tgt);
    }
    let refs: Vec<&MaskedBatch> = stage1.iter().collect();
    let restrict = opts.restrict_decoding.then_some(&builder.vocab);
    let pseudo = generate_pseudo_tokens_many(params, &refs, opts.decode, restrict)?;
    sentences
        .iter()
        .zip(pseudo)
        .zip(targets)
        .map(|((s, p), tgt)| builder.btmlm_stage2(s, policy, &p, tgt, rng))
        .collect()
}
