use serde::{Deserialize, Serialize};

use crate::corpus::{Corpora, LangId, MonoGenerator, MonoSentence};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::objectives::{
    btmlm_batches, objective_loss_many, BatchBuilder, BtmlmOptions, MaskedBatch, MaskingPolicy,
};
use crate::seed;
use crate::tensor::Scalar;
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplPoint {
    pub step: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplCurve {
    pub prob: f64,
    pub points: Vec<PplPoint>,
}

impl PplCurve {
    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.ppl.is_finite())
    }

    /// Final perplexity below the initial one.
    pub fn decreased(&self) -> bool {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => self.points.len() > 1 && b.ppl < a.ppl,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplConfig {
    /// Evaluate every this many steps (and at steps 0 and total).
    pub every: usize,
    pub sentences: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PplConfig {
    fn default() -> Self {
        Self {
            every: 250,
            sentences: 128,
            mask_rate: 0.15,
            seed: 777,
        }
    }
}

/// Fresh monolingual sentences, alternating languages, disjoint in seed
/// space from the training corpora.
pub fn heldout_mono(corpora: &Corpora, n: usize, seed_value: u64) -> Result<Vec<MonoSentence>> {
    let c = &corpora.config;
    let gens = (0..c.num_langs as LangId)
        .map(|l| MonoGenerator::new(&corpora.family, l, c.length_min..=c.length_max, c.zipf_s))
        .collect::<Result<Vec<_>>>()?;
    (0..n)
        .map(|i| gens[i % gens.len()].sentence(seed::derive_all(seed_value, &[0x33, i as u64])))
        .collect()
}

/// Back-translation masked-LM perplexity: Stage 1 with the given parameters,
/// then `exp` of the mean NLL of mask-only Stage-2 batches. The corruption is
/// a fixed function of `seed_value`.
pub fn btmlm_ppl<T: Scalar>(
    params: &Params<T>,
    builder: &BatchBuilder,
    sentences: &[MonoSentence],
    pseudo_prob: f64,
    mask_rate: f64,
    seed_value: u64,
) -> Result<f64> {
    let batches = stage2_batches(
        params,
        builder,
        sentences,
        pseudo_prob,
        mask_rate,
        seed_value,
    )?;
    let refs: Vec<&MaskedBatch> = batches.iter().collect();
    Ok(objective_loss_many(params, &refs)?.as_f64().exp())
}

pub fn stage2_batches<T: Scalar>(
    params: &Params<T>,
    builder: &BatchBuilder,
    sentences: &[MonoSentence],
    pseudo_prob: f64,
    mask_rate: f64,
    seed_value: u64,
) -> Result<Vec<MaskedBatch>> {
    let opts = BtmlmOptions {
        pseudo_prob,
        ..BtmlmOptions::default()
    };
    let mut rng = seed::rng(seed_value, &[0x99]);
    btmlm_batches(
        params,
        builder,
        sentences,
        &MaskingPolicy::mask_only(mask_rate),
        &opts,
        &mut rng,
    )
}

/// Trains one run per proportion and records held-out perplexity curves.
pub fn ppl_sweep<T: Scalar>(
    model: &ModelConfig,
    train: &TrainConfig,
    corpora: &Corpora,
    proportions: &[f64],
    cfg: &PplConfig,
) -> Result<Vec<PplCurve>> {
    if let Some(p) = proportions.iter().find(|p| !(**p > 0.0 && **p <= 0.5)) {
        return Err(Error::Config(format!(
            "pseudo-token proportion {p} outside (0, 0.5]"
        )));
    }
    if cfg.every == 0 {
        return Err(Error::Config(
            "ppl evaluation interval must be positive".into(),
        ));
    }
    let sentences = heldout_mono(corpora, cfg.sentences, cfg.seed)?;
    let builder = BatchBuilder::new(*corpora.vocab(), model.max_positions);
    let mut curves = Vec::with_capacity(proportions.len());
    for &prob in proportions {
        let tc = TrainConfig {
            pseudo_prob: prob,
            ..train.clone()
        };
        let mut trainer = Trainer::<T>::init(model, &tc, corpora)?;
        let eval =
            |p: &Params<T>| btmlm_ppl(p, &builder, &sentences, prob, cfg.mask_rate, cfg.seed);
        let mut points = vec![PplPoint {
            step: 0,
            ppl: eval(&trainer.params)?,
        }];
        while !trainer.is_done() {
            trainer.train_step()?;
            if trainer.step % cfg.every == 0 || trainer.is_done() {
                points.push(PplPoint {
                    step: trainer.step,
                    ppl: eval(&trainer.params)?,
                });
            }
        }
        curves.push(PplCurve { prob, points });
    }
    Ok(curves)
}

/// Plot-ready table: one row per evaluation step, one column per proportion.
pub fn curves_to_tsv(curves: &[PplCurve]) -> String {
    let mut out = String::from("step");
    for c in curves {
        out.push_str(&format!("\tppl@{:.0}%", c.prob * 100.0));
    }
    out.push('\n');
    let mut steps: Vec<usize> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    for s in steps {
        out.push_str(&s.to_string());
        for c in curves {
            match c.points.iter().find(|p| p.step == s) {
                Some(p) => out.push_str(&format!("\t{:.4}", p.ppl)),
                None => out.push('\t'),
            }
        }
        out.push('\n');
    }
    out
}

/// Summary table: one row per proportion with initial and final perplexity.
pub fn curves_summary_tsv(curves: &[PplCurve]) -> String {
    let mut out = String::from("prob\tinitial_ppl\tfinal_ppl\n");
    for c in curves {
        let first = c.points.first().map_or(f64::NAN, |p| p.ppl);
        let last = c.points.last().map_or(f64::NAN, |p| p.ppl);
        out.push_str(&format!("{:.2}\t{first:.4}\t{last:.4}\n", c.prob));
    }
    out
}
