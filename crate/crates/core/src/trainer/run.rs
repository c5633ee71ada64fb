use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpora, MonoSentence, SentencePair};
use crate::error::{Error, Result};
use crate::model::{param_grads, read_checkpoint, write_checkpoint, ModelConfig, Params};
use crate::objectives::{btmlm_batches, packed_loss, BatchBuilder, MaskedBatch, ObjectiveKind};
use crate::seed;
use crate::tensor::{Graph, Scalar, Tensor};
use crate::trainer::{
    adam_step, clip_global_norm, lr_at, Mixing, OptimizerState, Schedule, TrainConfig,
};

/// Layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.cfg")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step-{step:06}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in [self.checkpoints(), self.reports()] {
            fs::create_dir_all(&d)
                .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        }
        Ok(())
    }
}

/// Checkpoint with the highest step in the run directory.
pub fn latest_checkpoint(run: &RunPaths) -> Result<Option<(usize, PathBuf)>> {
    let dir = run.checkpoints();
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in
        fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
    {
        let path = entry
            .map_err(|e| Error::io("listing checkpoints", e))?
            .path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

/// One line of the metrics log. `elapsed_ms` is the wall time of the step.
///
/// Under sum mixing `objective` is absent and `components` holds each
/// objective's unweighted loss; `loss` is their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub objective: Option<ObjectiveKind>,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<(ObjectiveKind, f64)>,
    pub lr: f64,
    pub elapsed_ms: f64,
    pub tokens: usize,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Endless reshuffled pass over `len` items; epoch `e` uses its own permutation.
struct Stream {
    tag: u64,
    len: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl Stream {
    fn new(tag: u64, len: usize) -> Self {
        Self {
            tag,
            len,
            epoch: None,
            perm: vec![],
        }
    }

    fn index(&mut self, seed: u64, k: usize) -> usize {
        let epoch = (k / self.len) as u64;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.len).collect();
            self.perm
                .shuffle(&mut seed::rng(seed, &[0x57e4, self.tag, epoch]));
            self.epoch = Some(epoch);
        }
        self.perm[k % self.len]
    }
}

/// Mutable training state over borrowed corpora.
pub struct Trainer<'a, T> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: Params<T>,
    pub opt: OptimizerState<T>,
    /// Completed steps.
    pub step: usize,
    schedule: Schedule,
    builder: BatchBuilder,
    parallel: &'a [SentencePair],
    mono: Vec<MonoSentence>,
    streams: [Stream; 4],
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: &ModelConfig,
        cfg: &TrainConfig,
        corpora: &'a Corpora,
        params: Params<T>,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if params.config != *model {
            return Err(Error::Config(
                "parameters were built for a different model config".into(),
            ));
        }
        let vocab = *corpora.vocab();
        if vocab.size() != model.vocab || vocab.num_langs() != model.langs {
            return Err(Error::Config(format!(
                "corpus vocabulary {} / {} languages does not match model {} / {}",
                vocab.size(),
                vocab.num_langs(),
                model.vocab,
                model.langs
            )));
        }
        let mono = corpora.mono_interleaved();
        if mono.is_empty() || corpora.parallel.is_empty() {
            return Err(Error::Invalid(
                "training needs monolingual and parallel data".into(),
            ));
        }
        let streams = [
            Stream::new(1, mono.len()),
            Stream::new(2, corpora.parallel.len()),
            Stream::new(3, corpora.parallel.len()),
            Stream::new(4, mono.len()),
        ];
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            opt: OptimizerState::new(&params),
            params,
            step: 0,
            schedule: Schedule::new(cfg)?,
            builder: cfg.builder(vocab, model.max_positions),
            parallel: &corpora.parallel,
            mono,
            streams,
        })
    }

    /// Fresh parameters from `cfg.seed`.
    pub fn init(model: &ModelConfig, cfg: &TrainConfig, corpora: &'a Corpora) -> Result<Self> {
        Self::new(model, cfg, corpora, Params::init(model, cfg.seed)?)
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn batches<R: Rng>(
        &mut self,
        kind: ObjectiveKind,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<MaskedBatch>> {
        let b = self.cfg.batch_size;
        let seed = self.cfg.seed;
        let policy = self.cfg.policy();
        let stream = &mut self.streams[kind.index()];
        let ids: Vec<usize> = (k * b..(k + 1) * b)
            .map(|j| stream.index(seed, j))
            .collect();
        match kind {
            ObjectiveKind::Mmlm => ids
                .iter()
                .map(|&i| self.builder.mmlm(&self.mono[i], &policy, rng))
                .collect(),
            ObjectiveKind::Tlm | ObjectiveKind::Camlm => ids
                .iter()
                .map(|&i| {
                    let pair = &self.parallel[i];
                    let pair = if rng.gen::<f64>() < self.cfg.pair_swap_prob {
                        pair.swapped()
                    } else {
                        pair.clone()
                    };
                    if kind == ObjectiveKind::Tlm {
                        self.builder.tlm(&pair, &policy, rng)
                    } else {
                        self.builder.camlm(&pair, &policy, self.cfg.mask_mode, rng)
                    }
                })
                .collect(),
            ObjectiveKind::Btmlm => {
                let sents: Vec<MonoSentence> = ids.iter().map(|&i| self.mono[i].clone()).collect();
                btmlm_batches(
                    &self.params,
                    &self.builder,
                    &sents,
                    &policy,
                    &self.cfg.btmlm_options(),
                    rng,
                )
            }
        }
    }

    /// Runs the next scheduled step and returns its metrics record.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        if self.is_done() {
            return Err(Error::Invalid("training already finished".into()));
        }
        let start = Instant::now();
        let s = self.step + 1;
        // (kind, stream batch index, loss weight)
        let parts: Vec<(ObjectiveKind, usize, f64)> = match self.cfg.mixing {
            Mixing::RoundRobin => {
                let kind = self.schedule.at(self.step);
                vec![(kind, self.schedule.count_before(kind, self.step), 1.0)]
            }
            Mixing::Sum => {
                let btmlm_from = self.cfg.btmlm_start().min(self.step);
                self.cfg
                    .active_at(self.step)
                    .into_iter()
                    .map(|k| {
                        let k_idx = if k == ObjectiveKind::Btmlm {
                            self.step - btmlm_from
                        } else {
                            self.step
                        };
                        (k, k_idx, self.cfg.objective_weights[k.index()])
                    })
                    .collect()
            }
        };
        let mut rng = seed::rng(self.cfg.seed, &[0x7261, s as u64]);
        let mut batches = Vec::with_capacity(parts.len());
        for &(kind, k, _) in &parts {
            batches.push(self.batches(kind, k, &mut rng)?);
        }
        let tokens = batches.iter().flatten().map(MaskedBatch::len).sum();

        let mut g = Graph::new();
        let w = self.params.attach(&mut g, true);
        let dropout_seed =
            (self.model.dropout > 0.0).then(|| seed::derive_all(self.cfg.seed, &[0xd0, s as u64]));
        let mut total = None;
        let mut components = Vec::new();
        for (i, (&(kind, _, weight), b)) in parts.iter().zip(&batches).enumerate() {
            let refs: Vec<&MaskedBatch> = b.iter().collect();
            let dseed = dropout_seed.map(|d| seed::derive(d, i as u64));
            let part = packed_loss(&mut g, &self.model, &w, &refs, dseed)?;
            components.push((kind, g.value(part).item().as_f64()));
            let scaled = match self.cfg.mixing {
                Mixing::RoundRobin => part,
                Mixing::Sum => g.scale(part, T::lit(weight))?,
            };
            total = Some(match total {
                None => scaled,
                Some(t) => g.add(t, scaled)?,
            });
        }
        let loss = total.ok_or_else(|| Error::Invalid("no active objective".into()))?;
        let loss_value = g.value(loss).item().as_f64();
        g.backward(loss)?;
        let mut grads = param_grads(&g, &w);
        drop(g);
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        let lr = lr_at(s, &self.cfg);
        adam_step(
            &mut self.params,
            &grads,
            &mut self.opt,
            lr,
            &self.cfg.adam(),
        )?;
        self.step = s;
        let (objective, components) = match self.cfg.mixing {
            Mixing::RoundRobin => (Some(parts[0].0), vec![]),
            Mixing::Sum => (None, components),
        };
        Ok(MetricRecord {
            step: s,
            objective,
            loss: loss_value,
            components,
            lr,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            tokens,
        })
    }

    /// Parameters, Adam moments, step and config in one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.params.names();
        let mut entries: Vec<(String, &Tensor<T>)> = names
            .iter()
            .cloned()
            .zip(self.params.weights.items())
            .collect();
        for (n, m) in names.iter().zip(&self.opt.m) {
            entries.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            entries.push((format!("adam.v.{n}"), v));
        }
        let extra = serde_json::json!({
            "step": self.step,
            "optimizer_step": self.opt.step,
            "train": self.cfg,
        });
        write_checkpoint(path, &self.model, &entries, extra)
    }

    pub fn load(path: &Path, corpora: &'a Corpora) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let cfg: TrainConfig =
            serde_json::from_value(ck.extra.get("train").cloned().unwrap_or_default())
                .map_err(|e| bad(format!("training config: {e}")))?;
        let step = ck
            .extra
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing step".into()))? as usize;
        let opt_step = ck
            .extra
            .get("optimizer_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing optimizer step".into()))?;
        let params = Params::<T>::from_checkpoint(&ck, path)?;
        let mut t = Self::new(&ck.model, &cfg, corpora, params)?;
        let names = t.params.names();
        for (i, n) in names.iter().enumerate() {
            for (prefix, dst) in [("adam.m.", &mut t.opt.m[i]), ("adam.v.", &mut t.opt.v[i])] {
                let src = ck
                    .tensor(&format!("{prefix}{n}"))
                    .ok_or_else(|| bad(format!("missing {prefix}{n}")))?;
                if src.shape() != dst.shape() {
                    return Err(bad(format!("{prefix}{n} has the wrong shape")));
                }
                *dst = src.cast();
            }
        }
        t.opt.step = opt_step;
        t.step = step;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Where to write checkpoints and metrics; in-memory only when absent.
    pub run: Option<&'a RunPaths>,
    /// Stop after this many completed steps (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Params<T>,
    /// Records produced by this invocation.
    pub records: Vec<MetricRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

impl<T> TrainOutcome<T> {
    /// Mean step wall time in milliseconds.
    pub fn mean_step_ms(&self) -> f64 {
        mean_step_ms(&self.records)
    }
}

pub fn mean_step_ms(records: &[MetricRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.elapsed_ms).sum::<f64>() / records.len() as f64
}

/// Trains from `cfg.seed`'s initialization.
pub fn run_training<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpora: &Corpora,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome<T>> {
    let trainer = Trainer::<T>::init(model, cfg, corpora)?;
    if let Some(run) = opts.run {
        run.create_dirs()?;
        File::create(run.metrics())
            .map_err(|e| Error::io(format!("creating {}", run.metrics().display()), e))?;
    }
    drive(trainer, opts)
}

/// Continues from the latest checkpoint in `run`, discarding metrics logged
/// after it.
pub fn resume_training<T: Scalar>(
    corpora: &Corpora,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome<T>> {
    let run = opts
        .run
        .ok_or_else(|| Error::Invalid("resuming needs a run directory".into()))?;
    let (_, path) = latest_checkpoint(run)?.ok_or_else(|| Error::Checkpoint {
        path: run.checkpoints(),
        msg: "no checkpoint to resume from".into(),
    })?;
    let trainer = Trainer::<T>::load(&path, corpora)?;
    let kept: Vec<MetricRecord> = if run.metrics().exists() {
        read_metrics(&run.metrics())?
            .into_iter()
            .filter(|r| r.step <= trainer.step)
            .collect()
    } else {
        vec![]
    };
    let mut w = BufWriter::new(
        File::create(run.metrics())
            .map_err(|e| Error::io(format!("rewriting {}", run.metrics().display()), e))?,
    );
    for r in &kept {
        write_record(&mut w, r)?;
    }
    w.flush().map_err(|e| Error::io("writing metrics", e))?;
    drive(trainer, opts)
}

fn write_record(w: &mut impl Write, r: &MetricRecord) -> Result<()> {
    let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io("writing metrics", e))
}

fn drive<T: Scalar>(mut trainer: Trainer<'_, T>, opts: RunOptions<'_>) -> Result<TrainOutcome<T>> {
    let mut metrics = match opts.run {
        Some(run) => Some(BufWriter::new(
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(run.metrics())
                .map_err(|e| Error::io(format!("opening {}", run.metrics().display()), e))?,
        )),
        None => None,
    };
    let mut records = Vec::new();
    let mut last_checkpoint = None;
    let stop = opts
        .stop_after
        .unwrap_or(usize::MAX)
        .min(trainer.cfg.total_steps);
    while trainer.step < stop {
        let rec = trainer.train_step()?;
        if let Some(w) = metrics.as_mut() {
            write_record(w, &rec)?;
        }
        records.push(rec);
        let s = trainer.step;
        if let Some(run) = opts.run {
            if s.is_multiple_of(trainer.cfg.checkpoint_every) || s == trainer.cfg.total_steps {
                if let Some(w) = metrics.as_mut() {
                    w.flush().map_err(|e| Error::io("writing metrics", e))?;
                }
                let path = run.checkpoint(s);
                trainer.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush().map_err(|e| Error::io("writing metrics", e))?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        records,
        last_checkpoint,
    })
}
