//! Command-line front end for the cross-lingual lab.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
//! 3 I/O error, 4 refused to overwrite existing output.

mod inspect;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camlmlab::config::{LabConfig, SEED_ENV};
use camlmlab::corpus::{gen_corpora, Corpora};
use camlmlab::eval::{
    ablation_over_seeds, btmlm_ppl, heldout_mono, retrieval_eval, retrieval_eval_raw,
    transfer_probe, transfer_probe_raw, AblationOptions, ProbeTask,
};
use camlmlab::model::Params;
use camlmlab::objectives::BatchBuilder;
use camlmlab::trainer::{resume_training, run_training, RunOptions, RunPaths, TrainOutcome};
use camlmlab::{Error, NumericMode, Scalar};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "camlmlab",
    version,
    about = "Desk-scale cross-lingual pretraining lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set train.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; takes precedence over CAMLMLAB_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel and monolingual corpora.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder, writing checkpoints and metrics to a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory from `gen-corpus`; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps; the run can be resumed later.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Print an attention visibility matrix.
    InspectMask {
        #[arg(long, value_enum)]
        objective: inspect::Objective,
        #[arg(long)]
        src_len: usize,
        #[arg(long, default_value_t = 0)]
        tgt_len: usize,
        /// 1-based source positions, e.g. `2` or `1,3`.
        #[arg(long, value_delimiter = ',')]
        masked_src: Vec<usize>,
        /// 1-based target positions numbered after the source, e.g. `5,6`.
        #[arg(long, value_delimiter = ',')]
        masked_tgt: Vec<usize>,
        #[arg(long, default_value = "strict")]
        mode: String,
    },
    /// Evaluate a checkpoint, or the seeded initialization when none is given.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Train and evaluate every row of the objective ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the grid and per-row runs.
        #[arg(long)]
        out: PathBuf,
        /// Rows trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated training seeds; overrides `eval.ablation_seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Summarize a run or ablation directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Retrieval,
    Probe,
    Ppl,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Invalid(_) | Error::IdOutOfRange(_) => 2,
        Error::Io { .. } | Error::Checkpoint { .. } => 3,
        Error::RunDirNotEmpty(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> camlmlab::Result<()> {
    match cmd {
        Command::GenCorpus { cfg, out } => {
            let mut lab = load_config(&cfg)?;
            lab.corpus.seed = LabConfig::resolve_seed(lab.corpus.seed, cfg.seed)?;
            lab.corpus.validate()?;
            let c = gen_corpora(&lab.corpus, &out)?;
            println!(
                "wrote {} parallel, {} held-out and {} monolingual sentences to {}",
                c.parallel.len(),
                c.heldout.len(),
                c.mono.iter().map(Vec::len).sum::<usize>(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            run_dir,
            resume,
            stop_after,
        } => train(&cfg, data.as_deref(), &run_dir, resume, stop_after),
        Command::InspectMask {
            objective,
            src_len,
            tgt_len,
            masked_src,
            masked_tgt,
            mode,
        } => {
            let grid =
                inspect::render(objective, src_len, tgt_len, &masked_src, &masked_tgt, &mode)?;
            print!("{grid}");
            Ok(())
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            suite,
        } => eval(&cfg, data.as_deref(), checkpoint.as_deref(), suite),
        Command::Ablate {
            cfg,
            data,
            out,
            jobs,
            seeds,
        } => ablate(&cfg, data.as_deref(), &out, jobs, seeds),
        Command::Report { run_dir } => {
            print!("{}", report::render(&run_dir)?);
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs) -> camlmlab::Result<LabConfig> {
    let mut lab = match &args.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    for o in &args.overrides {
        lab.set(o)?;
    }
    Ok(lab)
}

fn corpora_for(lab: &LabConfig, data: Option<&Path>) -> camlmlab::Result<Corpora> {
    match data {
        Some(d) => Corpora::load(d),
        None => Corpora::generate(&lab.corpus),
    }
}

fn is_non_empty(dir: &Path) -> camlmlab::Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(format!("reading {}", dir.display()), e)),
    }
}

fn train(
    args: &ConfigArgs,
    data: Option<&Path>,
    run_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> camlmlab::Result<()> {
    let run = RunPaths::new(run_dir);
    let lab = if resume {
        // The checkpoint carries the training config; the echo supplies the
        // corpus and numeric mode of the interrupted run.
        if args.config.is_some() || !args.overrides.is_empty() || args.seed.is_some() {
            return Err(Error::Config(
                "--resume continues the recorded run and takes no config changes".into(),
            ));
        }
        LabConfig::load(&run.config_echo())?
    } else {
        if is_non_empty(run_dir)? {
            return Err(Error::RunDirNotEmpty(run_dir.to_path_buf()));
        }
        let mut lab = load_config(args)?;
        lab.train.seed = LabConfig::resolve_seed(lab.train.seed, args.seed)?;
        lab.validate()?;
        run.create_dirs()?;
        std::fs::write(run.config_echo(), lab.render()?)
            .map_err(|e| Error::io(format!("writing {}", run.config_echo().display()), e))?;
        lab
    };
    let corpora = corpora_for(&lab, data)?;
    let opts = RunOptions {
        run: Some(&run),
        stop_after,
    };
    match lab.train.numeric {
        NumericMode::F32 => train_as::<f32>(&lab, &corpora, opts, resume),
        NumericMode::F64 => train_as::<f64>(&lab, &corpora, opts, resume),
    }
}

fn train_as<T: Scalar>(
    lab: &LabConfig,
    corpora: &Corpora,
    opts: RunOptions<'_>,
    resume: bool,
) -> camlmlab::Result<()> {
    let out: TrainOutcome<T> = if resume {
        resume_training(corpora, opts)?
    } else {
        run_training(&lab.model, &lab.train, corpora, opts)?
    };
    let last = out.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps, last loss {last:.4}, {:.1} ms/step",
        out.records.len(),
        out.mean_step_ms()
    );
    if let Some(p) = out.last_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn eval(
    args: &ConfigArgs,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    suite: Suite,
) -> camlmlab::Result<()> {
    let mut lab = load_config(args)?;
    lab.train.seed = LabConfig::resolve_seed(lab.train.seed, args.seed)?;
    let corpora = corpora_for(&lab, data)?;
    let params = match checkpoint {
        Some(p) => Params::<f32>::load(p)?,
        None => {
            lab.validate()?;
            Params::<f32>::init(&lab.model, lab.train.seed)?
        }
    };
    match suite {
        Suite::Retrieval => {
            let c = retrieval_eval(&params, &corpora.heldout)?;
            let r = retrieval_eval_raw(&params, &corpora.heldout)?;
            println!("pairs     {}", c.pairs);
            println!("chance    {:.4}", 1.0 / c.pairs as f64);
            println!("top1_ab   {:.4}  (raw {:.4})", c.top1_ab, r.top1_ab);
            println!("top1_ba   {:.4}  (raw {:.4})", c.top1_ba, r.top1_ba);
            println!("mrr       {:.4}  (raw {:.4})", c.mrr, r.mrr);
        }
        Suite::Probe => {
            let cfg = lab.eval.probe();
            let task = ProbeTask::generate(&corpora, &cfg)?;
            let c = transfer_probe(&params, &task, &cfg)?;
            let r = transfer_probe_raw(&params, &task, &cfg)?;
            println!("acc_a     {:.4}  (raw {:.4})", c.acc_a, r.acc_a);
            println!("acc_b     {:.4}  (raw {:.4})", c.acc_b, r.acc_b);
            println!("gap       {:+.4}  (raw {:+.4})", c.gap, r.gap);
            println!("positives {:.3}", c.positive_rate);
        }
        Suite::Ppl => {
            let cfg = lab.eval.ppl();
            let sentences = heldout_mono(&corpora, cfg.sentences, cfg.seed)?;
            let builder = BatchBuilder::new(*corpora.vocab(), params.config.max_positions);
            for &prob in &lab.eval.ppl_proportions {
                let ppl = btmlm_ppl(&params, &builder, &sentences, prob, cfg.mask_rate, cfg.seed)?;
                println!("ppl@{:.0}%  {ppl:.4}", prob * 100.0);
            }
        }
    }
    Ok(())
}

fn ablate(
    args: &ConfigArgs,
    data: Option<&Path>,
    out: &Path,
    jobs: usize,
    seeds: Vec<u64>,
) -> camlmlab::Result<()> {
    if is_non_empty(out)? {
        return Err(Error::RunDirNotEmpty(out.to_path_buf()));
    }
    let lab = load_config(args)?;
    lab.validate()?;
    let seeds = if !seeds.is_empty() {
        seeds
    } else if args.seed.is_some() || std::env::var_os(SEED_ENV).is_some() {
        vec![LabConfig::resolve_seed(lab.train.seed, args.seed)?]
    } else {
        lab.eval.ablation_seeds.clone()
    };
    let corpora = corpora_for(&lab, data)?;
    let runs = out.join("runs");
    let opts = AblationOptions {
        jobs,
        run_root: Some(&runs),
        probe: lab.eval.probe(),
    };
    let grid = match lab.train.numeric {
        NumericMode::F32 => {
            ablation_over_seeds::<f32>(&lab.model, &lab.train, &corpora, &seeds, &opts)?
        }
        NumericMode::F64 => {
            ablation_over_seeds::<f64>(&lab.model, &lab.train, &corpora, &seeds, &opts)?
        }
    };
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write(report::GRID_JSONL, grid.to_jsonl())?;
    write(report::GRID_TEXT, grid.to_text())?;
    write("config.cfg", lab.render()?)?;
    print!("{}", grid.to_text());
    Ok(())
}
