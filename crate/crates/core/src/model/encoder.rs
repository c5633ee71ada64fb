use crate::corpus::MonoSentence;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, Params};
use crate::objectives::{MaskedBatch, Segment};
use crate::seed;
use crate::tensor::{AttentionSegment, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Compute vocabulary logits at every batch's prediction positions.
    pub logits: bool,
}

/// Graph handles for one packed forward pass.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// `hidden[0]` is the embedding sum, `hidden[l]` the output of block `l`.
    pub hidden: Vec<Var>,
    /// `[sum of predictions, V]` in batch order, when requested.
    pub logits: Option<Var>,
    /// First packed row of each batch.
    pub row_offsets: Vec<usize>,
    /// First logits row of each batch.
    pub logit_offsets: Vec<usize>,
}

/// Runs the encoder over several sequences packed row-wise. Attention never
/// crosses sequence boundaries, so each sequence's result is the same as
/// encoding it alone.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &ParamSet<Var>,
    batches: &[&MaskedBatch],
    opts: EncodeOptions,
) -> Result<EncoderVars> {
    if batches.is_empty() {
        return Err(Error::Invalid("encode needs at least one sequence".into()));
    }
    let mut tok = Vec::new();
    let mut pos = Vec::new();
    let mut lang = Vec::new();
    let mut segments = Vec::with_capacity(batches.len());
    let mut row_offsets = Vec::with_capacity(batches.len());
    let mut logit_offsets = Vec::with_capacity(batches.len());
    let mut predict_rows = Vec::new();
    for b in batches {
        b.validate()?;
        let offset = tok.len();
        row_offsets.push(offset);
        logit_offsets.push(predict_rows.len());
        for i in 0..b.len() {
            if b.tokens[i] as usize >= cfg.vocab {
                return Err(Error::IdOutOfRange(format!(
                    "token {} >= vocab {}",
                    b.tokens[i], cfg.vocab
                )));
            }
            if b.pos_ids[i] as usize >= cfg.max_positions {
                return Err(Error::Overflow {
                    len: b.pos_ids[i] as usize + 1,
                    max: cfg.max_positions,
                });
            }
            if b.lang_ids[i] as usize >= cfg.langs {
                return Err(Error::IdOutOfRange(format!(
                    "language {} >= {}",
                    b.lang_ids[i], cfg.langs
                )));
            }
        }
        tok.extend(b.tokens.iter().map(|&t| t as usize));
        pos.extend(b.pos_ids.iter().map(|&p| p as usize));
        lang.extend(b.lang_ids.iter().map(|&l| l as usize));
        predict_rows.extend(b.predict_positions.iter().map(|&p| offset + p));
        segments.push(AttentionSegment {
            offset,
            allowed: b.allowed.clone(),
        });
    }

    let dropout = |g: &mut Graph<T>, x: Var, site: u64| match opts.dropout_seed {
        Some(s) if cfg.dropout > 0.0 => g.dropout(x, cfg.dropout, seed::derive(s, site)),
        _ => Ok(x),
    };

    let e_tok = g.embedding(w.tok_emb, &tok)?;
    let e_pos = g.embedding(w.pos_emb, &pos)?;
    let e_lang = g.embedding(w.lang_emb, &lang)?;
    let x = g.add(e_tok, e_pos)?;
    let x = g.add(x, e_lang)?;
    let mut x = dropout(g, x, 0)?;
    let mut hidden = vec![x];

    for (l, lw) in w.layers.iter().enumerate() {
        let site = 1 + 2 * l as u64;
        let h = g.layer_norm(x, lw.ln1_gain, lw.ln1_bias)?;
        let q = linear(g, h, lw.wq, lw.bq)?;
        let k = g.matmul(h, lw.wk)?;
        let v = linear(g, h, lw.wv, lw.bv)?;
        let a = g.attention(q, k, v, cfg.heads, segments.clone())?;
        let a = linear(g, a, lw.wo, lw.bo)?;
        let a = dropout(g, a, site)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, lw.ln2_gain, lw.ln2_bias)?;
        let f = linear(g, h, lw.w1, lw.b1)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, lw.w2, lw.b2)?;
        let f = dropout(g, f, site + 1)?;
        x = g.add(x, f)?;
        hidden.push(x);
    }

    let logits = if opts.logits && !predict_rows.is_empty() {
        // Layer norm is row-wise, so normalizing only the gathered rows is exact.
        let rows = g.gather_rows(x, &predict_rows)?;
        let rows = g.layer_norm(rows, w.final_ln_gain, w.final_ln_bias)?;
        let z = g.matmul_nt(rows, w.tok_emb)?;
        Some(g.add_row(z, w.out_bias)?)
    } else {
        None
    };
    Ok(EncoderVars {
        hidden,
        logits,
        row_offsets,
        logit_offsets,
    })
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Rows of `batches` that carry sentence content, as packed row indices.
pub(crate) fn content_groups(batches: &[&MaskedBatch], row_offsets: &[usize]) -> Vec<Vec<usize>> {
    batches
        .iter()
        .zip(row_offsets)
        .map(|(b, &off)| {
            b.segments
                .iter()
                .enumerate()
                .filter(|(_, s)| **s != Segment::Special)
                .map(|(i, _)| off + i)
                .collect()
        })
        .collect()
}

/// Mean of the middle-layer states over content positions, one row per batch.
pub fn pooled<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &ParamSet<Var>,
    batches: &[&MaskedBatch],
    opts: EncodeOptions,
) -> Result<Var> {
    let opts = EncodeOptions {
        logits: false,
        ..opts
    };
    let vars = encode(g, cfg, w, batches, opts)?;
    let groups = content_groups(batches, &vars.row_offsets);
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!(
            "sequence {i} has no content positions to pool"
        )));
    }
    g.group_mean(vars.hidden[cfg.middle_layer()], &groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `layers + 1` tensors of shape `[n, H]`.
    pub hidden: Vec<Tensor<T>>,
    /// `[predict_positions.len(), V]`.
    pub logits: Tensor<T>,
}

pub fn forward<T: Scalar>(params: &Params<T>, batch: &MaskedBatch) -> Result<EncoderOutput<T>> {
    Ok(forward_many(params, &[batch])?.pop().unwrap())
}

/// Encodes several sequences in one packed pass.
pub fn forward_many<T: Scalar>(
    params: &Params<T>,
    batches: &[&MaskedBatch],
) -> Result<Vec<EncoderOutput<T>>> {
    let mut g = Graph::inference();
    let w = params.attach(&mut g, false);
    let vars = encode(
        &mut g,
        &params.config,
        &w,
        batches,
        EncodeOptions {
            dropout_seed: None,
            logits: true,
        },
    )?;
    let h = params.config.hidden;
    let vsz = params.config.vocab;
    let mut out = Vec::with_capacity(batches.len());
    for (bi, b) in batches.iter().enumerate() {
        let r0 = vars.row_offsets[bi];
        let hidden = vars
            .hidden
            .iter()
            .map(|&v| {
                Tensor::new(
                    vec![b.len(), h],
                    g.value(v).data()[r0 * h..(r0 + b.len()) * h].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let np = b.predict_positions.len();
        let logits = match vars.logits {
            Some(lv) if np > 0 => {
                let l0 = vars.logit_offsets[bi];
                Tensor::new(
                    vec![np, vsz],
                    g.value(lv).data()[l0 * vsz..(l0 + np) * vsz].to_vec(),
                )?
            }
            _ => Tensor::zeros(&[0, vsz]),
        };
        out.push(EncoderOutput { hidden, logits });
    }
    Ok(out)
}

/// Sentence vector of a single sequence: mean of middle-layer states over
/// its content positions.
pub fn pool_middle_layer<T: Scalar>(params: &Params<T>, batch: &MaskedBatch) -> Result<Vec<T>> {
    let mut g = Graph::inference();
    let w = params.attach(&mut g, false);
    let v = pooled(
        &mut g,
        &params.config,
        &w,
        &[batch],
        EncodeOptions::default(),
    )?;
    Ok(g.value(v).data().to_vec())
}

const POOL_CHUNK: usize = 64;

/// Pooled vectors of `[CLS] s [SEP]` encodings, one per sentence.
pub fn pool_many<T: Scalar>(params: &Params<T>, sentences: &[MonoSentence]) -> Result<Vec<Vec<T>>> {
    let w_template = params;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(POOL_CHUNK) {
        let batches = chunk
            .iter()
            .map(|s| MaskedBatch::plain(s, params.config.max_positions))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MaskedBatch> = batches.iter().collect();
        let mut g = Graph::inference();
        let w = w_template.attach(&mut g, false);
        let v = pooled(&mut g, &params.config, &w, &refs, EncodeOptions::default())?;
        let t = g.value(v);
        out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
    }
    Ok(out)
}
