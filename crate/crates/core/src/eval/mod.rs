//! Retrieval, transfer, perplexity and ablation measurements.

mod ablation;
mod finetune;
mod ppl;
mod probe;
mod retrieval;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{
    ablation_over_seeds, ablation_run, hardware_summary, AblationGrid, AblationOptions,
    AblationRow, ABLATION_ROWS, BASELINE_ROW,
};
pub use finetune::{hardest_negative_finetune, hardest_negative_loss, FinetuneConfig};
pub use ppl::{
    btmlm_ppl, curves_summary_tsv, curves_to_tsv, heldout_mono, ppl_sweep, stage2_batches,
    PplConfig, PplCurve, PplPoint,
};
pub use probe::{
    probe_from_embeddings, transfer_probe, transfer_probe_raw, LogisticHead, ProbeConfig,
    ProbeReport, ProbeTask,
};
pub use retrieval::{
    center_rows, retrieval_eval, retrieval_eval_raw, retrieval_from_embeddings, RetrievalReport,
};

/// The `[eval]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub finetune_tau: f64,
    pub probe_train: usize,
    pub probe_test: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub ppl_every: usize,
    pub ppl_sentences: usize,
    pub ppl_proportions: Vec<f64>,
    /// Training seeds of the ablation grid.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let (f, p, q) = (
            FinetuneConfig::default(),
            ProbeConfig::default(),
            PplConfig::default(),
        );
        Self {
            finetune_steps: f.steps,
            finetune_batch: f.batch_size,
            finetune_lr: f.lr,
            finetune_tau: f.tau,
            probe_train: p.train_examples,
            probe_test: p.test_examples,
            probe_steps: p.steps,
            probe_lr: p.lr,
            ppl_every: q.every,
            ppl_sentences: q.sentences,
            ppl_proportions: vec![0.05, 0.10, 0.15, 0.20],
            ablation_seeds: vec![1234, 1235, 1236],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.finetune_batch < 4 {
            return Err(Error::Config(
                "eval.finetune_batch must be at least 4".into(),
            ));
        }
        if self.probe_train == 0 || self.probe_test == 0 {
            return Err(Error::Config(
                "probe example counts must be positive".into(),
            ));
        }
        if self.ppl_every == 0 || self.ppl_sentences == 0 {
            return Err(Error::Config(
                "ppl_every and ppl_sentences must be positive".into(),
            ));
        }
        if let Some(p) = self
            .ppl_proportions
            .iter()
            .find(|p| !(**p > 0.0 && **p <= 0.5))
        {
            return Err(Error::Config(format!(
                "ppl proportion {p} outside (0, 0.5]"
            )));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune_steps,
            batch_size: self.finetune_batch,
            lr: self.finetune_lr,
            tau: self.finetune_tau,
            ..FinetuneConfig::default()
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            train_examples: self.probe_train,
            test_examples: self.probe_test,
            steps: self.probe_steps,
            lr: self.probe_lr,
            ..ProbeConfig::default()
        }
    }

    pub fn ppl(&self) -> PplConfig {
        PplConfig {
            every: self.ppl_every,
            sentences: self.ppl_sentences,
            ..PplConfig::default()
        }
    }
}
