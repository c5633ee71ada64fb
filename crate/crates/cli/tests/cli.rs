use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[model]
layers = 1
hidden = 16
heads = 2
ffn = 32
vocab = 44
max_positions = 24

[train]
total_steps = 40
warmup_steps = 4
batch_size = 4
peak_lr = 1e-3
checkpoint_every = 20
seed = 5

[corpus]
tokens_per_lang = 20
parallel_pairs = 120
mono_per_lang = 120
heldout_pairs = 16
length_min = 4
length_max = 8
seed = 21

[eval]
probe_train = 200
probe_test = 200
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camlmlab"))
        .args(args)
        .env_remove("CAMLMLAB_SEED")
        .output()
        .unwrap()
}

fn cli_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camlmlab"))
        .args(args)
        .env("CAMLMLAB_SEED", seed)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Column labels with a `1` in the row labelled `row`.
fn visible(grid: &str, row: &str) -> BTreeSet<String> {
    let mut lines = grid.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    let line = lines
        .find(|l| l.split_whitespace().next() == Some(row))
        .unwrap_or_else(|| panic!("no row {row} in\n{grid}"));
    line.split_whitespace()
        .skip(1)
        .zip(&header)
        .filter(|(v, _)| *v == "1")
        .map(|(_, l)| l.to_string())
        .collect()
}

fn set(labels: &[&str]) -> BTreeSet<String> {
    labels.iter().map(|s| s.to_string()).collect()
}

#[test]
fn gen_corpus_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = cli(&["gen-corpus", "--config", &cfg, "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in [
        "parallel.txt",
        "heldout.txt",
        "mono_0.txt",
        "mono_1.txt",
        "corpus.cfg",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn gen_corpus_without_out_is_a_usage_error() {
    let o = cli(&["gen-corpus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_override_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("c");
    let o = cli(&["gen-corpus", "--set", "corpus.nope=1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = cli(&[
        "gen-corpus",
        "--set",
        "corpus.tokens_per_lang=0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let gen = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = d.path().join(name);
        let mut args = vec!["gen-corpus", "--config", &cfg, "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = match env {
            Some(e) => cli_env(&args, e),
            None => cli(&args),
        };
        assert_eq!(code(&o), 0);
        fs::read_to_string(out.join("corpus.cfg")).unwrap()
    };
    let file = gen("file", &[], None);
    let env = gen("env", &[], Some("7"));
    let flag = gen("flag", &["--seed", "8"], Some("7"));
    let seed_line = |t: &str| {
        t.lines()
            .find(|l| l.starts_with("seed"))
            .unwrap()
            .to_string()
    };
    assert_eq!(seed_line(&file), "seed = 21");
    assert_eq!(seed_line(&env), "seed = 7");
    assert_eq!(seed_line(&flag), "seed = 8");
}

#[test]
fn train_writes_a_run_and_refuses_to_overwrite() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let run = d.path().join("run");
    let o = cli(&["train", "--config", &cfg, "--run-dir", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("config.cfg").is_file());
    assert!(run.join("metrics.jsonl").is_file());
    assert!(run.join("checkpoints/step-000020.ckpt").is_file());
    assert!(run.join("checkpoints/step-000040.ckpt").is_file());
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        40
    );

    let again = cli(&["train", "--config", &cfg, "--run-dir", s(&run)]);
    assert_eq!(code(&again), 4);

    let rep = cli(&["report", "--run-dir", s(&run)]);
    assert_eq!(code(&rep), 0);
    let text = stdout(&rep);
    assert!(text.contains("steps      40 / 40"), "{text}");
    assert!(text.contains("mmlm"), "{text}");
    assert!(run.join("reports/summary.txt").is_file());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let data = d.path().join("data");
    assert_eq!(
        code(&cli(&["gen-corpus", "--config", &cfg, "--out", s(&data)])),
        0
    );
    let (full, cut) = (d.path().join("full"), d.path().join("cut"));
    let base = ["train", "--config", &cfg, "--data", s(&data), "--run-dir"];
    let mut a = base.to_vec();
    a.push(s(&full));
    assert_eq!(code(&cli(&a)), 0);
    let mut b = base.to_vec();
    b.extend([s(&cut), "--stop-after", "30"]);
    assert_eq!(code(&cli(&b)), 0);
    assert!(!cut.join("checkpoints/step-000040.ckpt").exists());

    let o = cli(&[
        "train",
        "--data",
        s(&data),
        "--run-dir",
        s(&cut),
        "--resume",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = "checkpoints/step-000040.ckpt";
    assert_eq!(
        fs::read(full.join(ck)).unwrap(),
        fs::read(cut.join(ck)).unwrap()
    );

    let o = cli(&["train", "--config", &cfg, "--run-dir", s(&cut), "--resume"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn camlm_figure_grid_matches_the_worked_example() {
    let o = cli(&[
        "inspect-mask",
        "--objective",
        "camlm",
        "--src-len",
        "3",
        "--tgt-len",
        "4",
        "--masked-src",
        "2",
        "--masked-tgt",
        "5,6",
        "--mode",
        "figure",
    ]);
    assert_eq!(code(&o), 0);
    let grid = stdout(&o);
    let tokens = |v: BTreeSet<String>| -> BTreeSet<String> {
        v.into_iter().filter(|l| !l.starts_with('[')).collect()
    };
    assert_eq!(
        tokens(visible(&grid, "M2")),
        set(&["M2", "y4", "M5", "M6", "y7"])
    );
    assert_eq!(tokens(visible(&grid, "M5")), set(&["x1", "M2", "x3", "M5"]));
    assert_eq!(tokens(visible(&grid, "M6")), set(&["x1", "M2", "x3", "M6"]));
}

#[test]
fn mmlm_grid_is_all_ones() {
    let o = cli(&[
        "inspect-mask",
        "--objective",
        "mmlm",
        "--src-len",
        "5",
        "--tgt-len",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let grid = stdout(&o);
    let body: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(body.len(), 7);
    assert!(body
        .iter()
        .all(|l| l.split_whitespace().skip(1).all(|v| v == "1")));
}

#[test]
fn stage1_placeholders_see_the_source_and_themselves() {
    let o = cli(&[
        "inspect-mask",
        "--objective",
        "btmlm-stage1",
        "--src-len",
        "4",
        "--tgt-len",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let grid = stdout(&o);
    for m in ["M5", "M6", "M7"] {
        let mut expect = set(&["[CLS]", "x1", "x2", "x3", "x4", "[SEP]"]);
        expect.insert(m.to_string());
        assert_eq!(visible(&grid, m), expect, "{grid}");
    }
}

#[test]
fn inconsistent_mask_sets_exit_two() {
    for extra in [
        &["--masked-src", "4"][..],
        &["--masked-tgt", "2"][..],
        &["--masked-src", "2,2"][..],
    ] {
        let mut args = vec![
            "inspect-mask",
            "--objective",
            "camlm",
            "--src-len",
            "3",
            "--tgt-len",
            "4",
            "--masked-tgt",
            "5",
        ];
        args.extend_from_slice(extra);
        assert_eq!(code(&cli(&args)), 2, "{extra:?}");
    }
    let o = cli(&[
        "inspect-mask",
        "--objective",
        "camlm",
        "--src-len",
        "3",
        "--tgt-len",
        "4",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn random_init_retrieval_report_is_near_chance() {
    let o = cli(&[
        "eval",
        "--suite",
        "retrieval",
        "--set",
        "corpus.parallel_pairs=10",
        "--set",
        "corpus.mono_per_lang=10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("pairs     256"), "{text}");
    let raw = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line.rsplit("raw ")
            .next()
            .unwrap()
            .trim_end_matches(')')
            .parse()
            .unwrap()
    };
    let chance: f64 = 1.0 / 256.0;
    let bound = chance + 3.0 * (chance * (1.0 - chance) / 256.0).sqrt();
    assert!(raw("top1_ab") <= bound && raw("top1_ba") <= bound, "{text}");
}

#[test]
fn eval_of_a_checkpoint_runs_every_suite() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let run = d.path().join("run");
    assert_eq!(
        code(&cli(&["train", "--config", &cfg, "--run-dir", s(&run)])),
        0
    );
    let ck = run.join("checkpoints/step-000040.ckpt");
    for (suite, key) in [
        ("retrieval", "top1_ab"),
        ("probe", "gap"),
        ("ppl", "ppl@15%"),
    ] {
        let o = cli(&[
            "eval",
            "--config",
            &cfg,
            "--checkpoint",
            s(&ck),
            "--suite",
            suite,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(key), "{}", stdout(&o));
    }
    let o = cli(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&d.path().join("missing.ckpt")),
        "--suite",
        "retrieval",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ablate_writes_six_rows_per_seed_and_report_shows_the_ratio() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let out = d.path().join("grid");
    let o = cli(&[
        "ablate",
        "--config",
        &cfg,
        "--set",
        "train.total_steps=10",
        "--seeds",
        "3,4",
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("grid.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 12);
    assert!(out.join("runs/seed-3/exp5/metrics.jsonl").is_file());
    let rep = cli(&["report", "--run-dir", s(&out)]);
    assert_eq!(code(&rep), 0);
    assert!(stdout(&rep).contains("step-time ratio full/mmlm+tlm"));

    let again = cli(&["ablate", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(code(&again), 4);
}

#[test]
fn report_on_an_empty_directory_exits_three() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(&["report", "--run-dir", s(d.path())])), 3);
    let missing = d.path().join("nope");
    assert_eq!(code(&cli(&["report", "--run-dir", s(&missing)])), 3);
}
