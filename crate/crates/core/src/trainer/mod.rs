//! Optimization loop: Adam with warmup and linear decay, weighted
//! round-robin over objectives, checkpoints and metrics.

mod adam;
mod run;
mod schedule;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamConfig, OptimizerState};
pub use run::{
    latest_checkpoint, mean_step_ms, read_metrics, resume_training, run_training, MetricRecord,
    RunOptions, RunPaths, TrainOutcome, Trainer,
};
pub use schedule::Schedule;

use crate::error::{Error, Result};
use crate::objectives::{BtmlmOptions, MaskMode, MaskingPolicy, ObjectiveKind, PseudoDecode};
use crate::tensor::NumericMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sentences (or pairs) per step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// MMLM, TLM, CAMLM, BTMLM.
    pub objective_weights: [f64; 4],
    /// First step with BTMLM enabled; `None` means 30% of `total_steps`.
    pub btmlm_start_step: Option<usize>,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub numeric: NumericMode,
    pub mask_mode: MaskMode,
    pub mask_rate: f64,
    pub pseudo_prob: f64,
    pub restrict_decoding: bool,
    /// Probability of presenting a parallel pair target-first.
    pub pair_swap_prob: f64,
    /// Restart position ids at the target side of TLM and CAMLM pairs.
    pub restart_target_positions: bool,
    pub mixing: Mixing,
}

/// How enabled objectives share the steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// One objective per step, weighted round-robin.
    #[default]
    RoundRobin,
    /// Every active objective each step; the loss is their weighted sum.
    Sum,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 300,
            total_steps: 3000,
            batch_size: 32,
            beta1: 0.98,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            objective_weights: [1.0; 4],
            btmlm_start_step: None,
            checkpoint_every: 500,
            seed: 1234,
            numeric: NumericMode::F32,
            mask_mode: MaskMode::Strict,
            mask_rate: 0.15,
            pseudo_prob: 0.15,
            restrict_decoding: true,
            pair_swap_prob: 0.5,
            restart_target_positions: false,
            mixing: Mixing::RoundRobin,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("batch_size and checkpoint_every must be positive".into());
        }
        if self
            .objective_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return bad("objective weights must be finite and non-negative".into());
        }
        if self.objective_weights.iter().all(|w| *w == 0.0) {
            return bad("at least one objective weight must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("eps and clip_norm must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(0.0..=1.0).contains(&self.pair_swap_prob) {
            return bad("mask_rate and pair_swap_prob must lie in [0, 1]".into());
        }
        if !(self.pseudo_prob > 0.0 && self.pseudo_prob <= 0.5) {
            return bad(format!("pseudo_prob {} outside (0, 0.5]", self.pseudo_prob));
        }
        Ok(())
    }

    pub fn btmlm_start(&self) -> usize {
        self.btmlm_start_step
            .unwrap_or((0.3 * self.total_steps as f64).round() as usize)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn builder(
        &self,
        vocab: crate::corpus::Vocabulary,
        max_len: usize,
    ) -> crate::objectives::BatchBuilder {
        crate::objectives::BatchBuilder {
            restart_target_positions: self.restart_target_positions,
            ..crate::objectives::BatchBuilder::new(vocab, max_len)
        }
    }

    pub fn policy(&self) -> MaskingPolicy {
        MaskingPolicy {
            mask_rate: self.mask_rate,
            ..MaskingPolicy::default()
        }
    }

    pub fn btmlm_options(&self) -> BtmlmOptions {
        BtmlmOptions {
            pseudo_prob: self.pseudo_prob,
            restrict_decoding: self.restrict_decoding,
            decode: PseudoDecode::Argmax,
        }
    }

    pub fn enabled(&self) -> Vec<ObjectiveKind> {
        ObjectiveKind::ALL
            .into_iter()
            .filter(|k| self.objective_weights[k.index()] > 0.0)
            .collect()
    }

    /// Weights enabling exactly `kinds`, each with weight 1.
    /// Objectives trained at step index `step` under sum mixing.
    pub fn active_at(&self, step: usize) -> Vec<ObjectiveKind> {
        let early = self.enabled().iter().any(|k| *k != ObjectiveKind::Btmlm);
        self.enabled()
            .into_iter()
            .filter(|k| *k != ObjectiveKind::Btmlm || !early || step >= self.btmlm_start())
            .collect()
    }

    pub fn weights_for(kinds: &[ObjectiveKind]) -> [f64; 4] {
        let mut w = [0.0; 4];
        for k in kinds {
            w[k.index()] = 1.0;
        }
        w
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.min(cfg.total_steps) as f64;
    let w = cfg.warmup_steps as f64;
    let t = cfg.total_steps as f64;
    if s < w {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * (t - s) / (t - w)
    }
}
