use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpora;
use crate::error::{Error, Result};
use crate::eval::probe::{transfer_probe, transfer_probe_raw, ProbeConfig, ProbeReport, ProbeTask};
use crate::eval::retrieval::{retrieval_eval, retrieval_eval_raw, RetrievalReport};
use crate::model::{ModelConfig, Params};
use crate::objectives::ObjectiveKind::{self, Btmlm, Camlm, Mmlm, Tlm};
use crate::tensor::Scalar;
use crate::trainer::{run_training, RunOptions, RunPaths, TrainConfig};

/// Objective sets of the trained grid rows.
pub const ABLATION_ROWS: [(&str, &[ObjectiveKind]); 5] = [
    ("exp1", &[Mmlm]),
    ("exp2", &[Mmlm, Tlm]),
    ("exp3", &[Mmlm, Camlm]),
    ("exp4", &[Mmlm, Btmlm, Camlm]),
    ("exp5", &[Mmlm, Btmlm, Camlm, Tlm]),
];

pub const BASELINE_ROW: &str = "exp0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub exp: String,
    /// Empty for the untrained baseline.
    pub objectives: Vec<ObjectiveKind>,
    pub seed: u64,
    pub init_checksum: u64,
    /// Language-centered cosine retrieval.
    pub retrieval: RetrievalReport,
    /// Plain cosine retrieval.
    pub retrieval_raw: RetrievalReport,
    pub probe: ProbeReport,
    pub probe_raw: ProbeReport,
    /// Mean wall time per training step; 0 for the baseline.
    pub mean_step_ms: f64,
    /// Mean loss over the last tenth of training; absent for the baseline.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn row(&self, exp: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.exp == exp && r.seed == seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Mean step time of the full-objective row over that of MMLM+TLM,
    /// averaged over seeds.
    pub fn overhead_ratio(&self) -> Option<f64> {
        let ratios: Vec<f64> = self
            .seeds()
            .into_iter()
            .filter_map(|s| {
                let full = self.row("exp5", s)?.mean_step_ms;
                let base = self.row("exp2", s)?.mean_step_ms;
                (base > 0.0).then(|| full / base)
            })
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }

    /// Inverse of [`Self::to_jsonl`]; `path` only labels errors.
    pub fn from_jsonl(text: &str, path: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    /// Aligned-column summary.
    pub fn to_text(&self) -> String {
        let header = [
            "exp",
            "seed",
            "objectives",
            "top1_ab",
            "top1_ba",
            "mrr",
            "raw_top1",
            "acc_a",
            "acc_b",
            "gap",
            "raw_gap",
            "step_ms",
            "init",
        ];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let objs = if r.objectives.is_empty() {
                "random-init".to_string()
            } else {
                r.objectives
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join("+")
            };
            rows.push(vec![
                r.exp.clone(),
                r.seed.to_string(),
                objs,
                format!("{:.3}", r.retrieval.top1_ab),
                format!("{:.3}", r.retrieval.top1_ba),
                format!("{:.3}", r.retrieval.mrr),
                format!("{:.3}", r.retrieval_raw.top1_mean()),
                format!("{:.3}", r.probe.acc_a),
                format!("{:.3}", r.probe.acc_b),
                format!("{:+.3}", r.probe.gap),
                format!("{:+.3}", r.probe_raw.gap),
                format!("{:.1}", r.mean_step_ms),
                format!("{:016x}", r.init_checksum),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if let Some(ratio) = self.overhead_ratio() {
            out.push_str(&format!(
                "\nstep-time ratio full/mmlm+tlm: {ratio:.3}x on {}\n",
                hardware_summary()
            ));
        }
        out
    }
}

/// CPU model and available parallelism, for reports.
pub fn hardware_summary() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model}, {threads} hardware thread(s)")
}

#[derive(Debug, Clone, Copy)]
pub struct AblationOptions<'a> {
    /// Rows trained concurrently.
    pub jobs: usize,
    /// Per-row run directories go under this root when present.
    pub run_root: Option<&'a std::path::Path>,
    pub probe: ProbeConfig,
}

impl Default for AblationOptions<'_> {
    fn default() -> Self {
        Self {
            jobs: 1,
            run_root: None,
            probe: ProbeConfig::default(),
        }
    }
}

/// Trains every grid row from the same initialization and evaluates it.
/// Rows differ only in their objective weights.
pub fn ablation_run<T: Scalar>(
    model: &ModelConfig,
    base: &TrainConfig,
    corpora: &Corpora,
    opts: &AblationOptions<'_>,
) -> Result<AblationGrid> {
    let task = ProbeTask::generate(corpora, &opts.probe)?;
    let init = Params::<T>::init(model, base.seed)?;
    let evaluate = |exp: &str,
                    objectives: Vec<ObjectiveKind>,
                    p: &Params<T>,
                    step_ms: f64,
                    loss: Option<f64>| {
        Ok::<_, Error>(AblationRow {
            exp: exp.to_string(),
            objectives,
            seed: base.seed,
            init_checksum: init.checksum(),
            retrieval: retrieval_eval(p, &corpora.heldout)?,
            retrieval_raw: retrieval_eval_raw(p, &corpora.heldout)?,
            probe: transfer_probe(p, &task, &opts.probe)?,
            probe_raw: transfer_probe_raw(p, &task, &opts.probe)?,
            mean_step_ms: step_ms,
            final_loss: loss,
        })
    };
    let mut rows = vec![evaluate(BASELINE_ROW, vec![], &init, 0.0, None)?];

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> =
        Mutex::new((0..ABLATION_ROWS.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= ABLATION_ROWS.len() {
            break;
        }
        let (exp, kinds) = ABLATION_ROWS[i];
        let res = (|| {
            let cfg = TrainConfig {
                objective_weights: TrainConfig::weights_for(kinds),
                ..base.clone()
            };
            let run = opts.run_root.map(|r| RunPaths::new(r.join(exp)));
            let out = run_training::<T>(
                model,
                &cfg,
                corpora,
                RunOptions {
                    run: run.as_ref(),
                    stop_after: None,
                },
            )?;
            let tail = (out.records.len() / 10).max(1);
            let loss = out.records[out.records.len() - tail..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / tail as f64;
            let trained_init = Params::<T>::init(model, cfg.seed)?.checksum();
            debug_assert_eq!(trained_init, init.checksum());
            evaluate(
                exp,
                kinds.to_vec(),
                &out.params,
                out.mean_step_ms(),
                Some(loss),
            )
        })();
        results.lock().unwrap()[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.max(1) {
            s.spawn(worker);
        }
    });
    for r in results.into_inner().unwrap() {
        rows.push(r.expect("every row ran")?);
    }
    Ok(AblationGrid { rows })
}

/// One grid per training seed, concatenated. Run directories go under
/// `seed-<n>/` of the run root.
pub fn ablation_over_seeds<T: Scalar>(
    model: &ModelConfig,
    base: &TrainConfig,
    corpora: &Corpora,
    seeds: &[u64],
    opts: &AblationOptions<'_>,
) -> Result<AblationGrid> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let root = opts.run_root.map(|r| r.join(format!("seed-{seed}")));
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let o = AblationOptions {
            run_root: root.as_deref(),
            ..*opts
        };
        rows.extend(ablation_run::<T>(model, &cfg, corpora, &o)?.rows);
    }
    Ok(AblationGrid { rows })
}
