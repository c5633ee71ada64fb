use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::model::{param_grads, pooled, EncodeOptions, ParamSet, Params};
use crate::objectives::MaskedBatch;
use crate::seed;
use crate::tensor::{Graph, Scalar, Var};
use crate::trainer::{adam_step, clip_global_norm, AdamConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            lr: 1e-4,
            tau: 0.05,
            seed: 99,
        }
    }
}

/// Hardest-negative loss of one batch of pairs, with gradients on `g`.
fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    w: &ParamSet<Var>,
    pairs: &[&SentencePair],
    tau: f64,
) -> Result<Var> {
    let max = params.config.max_positions;
    let mut seqs = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        seqs.push(MaskedBatch::plain(&p.src, max)?);
    }
    for p in pairs {
        seqs.push(MaskedBatch::plain(&p.tgt, max)?);
    }
    let refs: Vec<&MaskedBatch> = seqs.iter().collect();
    let all = pooled(g, &params.config, w, &refs, EncodeOptions::default())?;
    let all = g.l2_normalize_rows(all)?;
    let n = pairs.len();
    let src = g.gather_rows(all, &(0..n).collect::<Vec<_>>())?;
    let tgt = g.gather_rows(all, &(n..2 * n).collect::<Vec<_>>())?;
    let sim = g.matmul_nt(src, tgt)?;
    g.hardest_negative_bce(sim, T::lit(tau))
}

/// Loss of a fixed batch without updating anything.
pub fn hardest_negative_loss<T: Scalar>(
    params: &Params<T>,
    pairs: &[SentencePair],
    tau: f64,
) -> Result<f64> {
    let refs: Vec<&SentencePair> = pairs.iter().collect();
    let mut g = Graph::inference();
    let w = params.attach(&mut g, false);
    let l = batch_loss(&mut g, params, &w, &refs, tau)?;
    Ok(g.value(l).item().as_f64())
}

/// Fine-tunes the encoder so pooled embeddings of translations attract and
/// the in-batch hardest negative repels. Returns the updated parameters and
/// the per-step losses.
pub fn hardest_negative_finetune<T: Scalar>(
    params: &Params<T>,
    pairs: &[SentencePair],
    cfg: &FinetuneConfig,
) -> Result<(Params<T>, Vec<f64>)> {
    if cfg.batch_size < 4 || pairs.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "fine-tuning needs batches of at least 4 pairs (batch {}, {} pairs)",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let mut p = params.clone();
    let mut opt = OptimizerState::new(&p);
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(cfg.seed, &[0xf1, step as u64]);
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), cfg.batch_size);
        let batch: Vec<&SentencePair> = idx.into_iter().map(|i| &pairs[i]).collect();
        let mut g = Graph::new();
        let w = p.attach(&mut g, true);
        let loss = batch_loss(&mut g, &p, &w, &batch, cfg.tau)?;
        losses.push(g.value(loss).item().as_f64());
        g.backward(loss)?;
        let mut grads = param_grads(&g, &w);
        clip_global_norm(&mut grads, 1.0);
        adam_step(&mut p, &grads, &mut opt, cfg.lr, &adam)?;
    }
    Ok((p, losses))
}
