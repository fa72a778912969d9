use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attn_contrast::data::parse_dpr;
use attn_contrast::eval::{parse_report, ReportFormat};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attn-contrast"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Single-line JSON error record on stderr.
fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

const TINY: [&str; 10] = ["--layers", "1", "--heads", "2", "--d-model", "8", "--d-ff", "16", "--max-len", "24"];

/// Writes a 12-pair corpus split 9/3 and returns (train, eval) paths.
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let (all, train, eval) = (dir.join("all.txt"), dir.join("train.txt"), dir.join("eval.txt"));
    ok(&[
        "gen-synth", "--seed", "3", "--pairs", "12", "--out", p(&all), "--split", "0.25", "--train-out", p(&train),
        "--eval-out", p(&eval),
    ]);
    (train, eval)
}

fn train(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let (tr, ev) = corpus(dir);
    let mut args = vec!["train", "--train", p(&tr), "--eval", p(&ev), "--out", p(out), "--seed", "1"];
    args.extend(TINY);
    args.extend(extra);
    run(&args)
}

fn log_records(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_synth_is_deterministic_and_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    ok(&["gen-synth", "--seed", "7", "--out", p(&a)]);
    ok(&["gen-synth", "--seed", "7", "--out", p(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let parsed = parse_dpr(&text).unwrap();
    assert_eq!((parsed.corpus.pairs.len(), parsed.errors.len()), (200, 0));
    for pair in &parsed.corpus.pairs {
        pair.validate().unwrap();
    }
}

#[test]
fn gen_synth_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = (dir.path().join("t.txt"), dir.path().join("e.txt"));
    let out = ok(&[
        "gen-synth", "--seed", "1", "--out", p(&dir.path().join("all.txt")), "--split", "0.25", "--train-out", p(&tr),
        "--eval-out", p(&ev),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("150 train pairs"));
    let count = |f: &Path| parse_dpr(&std::fs::read_to_string(f).unwrap()).unwrap().corpus.pairs.len();
    assert_eq!((count(&tr), count(&ev)), (150, 50));
}

#[test]
fn train_help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "--epochs", "[default: 22]", "--batch-pairs", "[default: 18]", "--alpha", "[default: 0.05]", "--beta",
        "[default: 0.02]", "--lambda", "[default: 1.0]", "--enable-ca", "--enable-cm", "--config", "--k",
    ] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
}

#[test]
fn cm_only_run_logs_zero_ca() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = train(dir.path(), &out, &["--epochs", "1", "--batch-pairs", "3", "--k", "1", "--enable-cm"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let records = log_records(&out);
    assert_eq!(records[0]["record"], "config");
    let steps: Vec<_> = records.iter().filter(|r| r["record"] == "step").collect();
    assert_eq!(steps.len(), 3);
    assert!(steps.iter().all(|s| s["ca"] == 0.0 && s["cm"].as_f64().unwrap() < 0.0));
    assert!(out.join("final.ckpt").exists());
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# test\nepochs = 2\nbatch-pairs = 9\nalpha = 0.5\n").unwrap();
    let out = dir.path().join("run");
    let r = train(dir.path(), &out, &["--config", p(&cfg), "--epochs", "1", "--k", "1"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let header = &log_records(&out)[0];
    let text = header["config"].as_str().unwrap();
    // flag beats file, file beats default, untouched keys keep defaults
    for line in ["epochs = 1", "batch-pairs = 9", "alpha = 0.5", "beta = 0.02", "k = 1"] {
        assert!(text.lines().any(|l| l == line), "{line} not in\n{text}");
    }
    assert_eq!(log_records(&out).iter().filter(|r| r["record"] == "epoch").count(), 1);
}

#[test]
fn config_errors_exit_1_with_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 2\nlearning-rate = 3\n").unwrap();
    let r = train(dir.path(), &dir.path().join("run"), &["--config", p(&cfg)]);
    assert_eq!(r.status.code(), Some(1));
    let rec = error_record(&r);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("learning-rate"));

    let r = run(&["train", "--epochs", "two"]);
    assert_eq!(r.status.code(), Some(1));
    let r = run(&["eval", "--no-such-flag"]);
    assert_eq!((r.status.code(), error_record(&r)["error"].as_str()), (Some(1), Some("usage")));
}

#[test]
fn missing_checkpoint_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ev) = corpus(dir.path());
    let missing = dir.path().join("nope.ckpt");
    let r = run(&["eval", "--checkpoint", p(&missing), "--data", p(&ev)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(error_record(&r)["message"].as_str().unwrap().contains("nope.ckpt"));
}

#[test]
fn non_finite_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &["--epochs", "0", "--k", "1"]).status.success());
    let ckpt = out.join("final.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let (_, ev) = corpus(dir.path());
    let r = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&ev), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!((r.status.code(), error_record(&r)["error"].as_str()), (Some(3), Some("numeric")));
}

#[test]
fn untrained_eval_is_at_chance_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &["--epochs", "0", "--k", "1"]).status.success());
    let ckpt = out.join("final.ckpt");
    let eval_path = dir.path().join("eval.txt");
    let report = |name: &str| {
        let path = dir.path().join(name);
        ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&eval_path), "--out", p(&path)]);
        std::fs::read_to_string(path).unwrap()
    };
    let (a, b) = (report("a.json"), report("b.json"));
    assert_eq!(a, b);
    let acc = serde_json::from_str::<serde_json::Value>(&a).unwrap()["accuracy"].as_f64().unwrap();
    assert!((0.35..=0.65).contains(&acc), "{acc}");
}

#[test]
fn analyze_clamps_k_and_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &["--epochs", "1", "--k", "1", "--batch-pairs", "9"]).status.success());
    let ckpt = out.join("final.ckpt");
    let data = dir.path().join("eval.txt");
    let (json, csv) = (dir.path().join("a.json"), dir.path().join("a.csv"));
    let r = ok(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--k", "9", "--out", p(&json)]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("exceeds"));
    ok(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--k", "9", "--format", "csv", "--out", p(&csv)]);
    let a = parse_report(&std::fs::read_to_string(&json).unwrap(), ReportFormat::Json).unwrap();
    let b = parse_report(&std::fs::read_to_string(&csv).unwrap(), ReportFormat::Csv).unwrap();
    assert_eq!(a.k, 1);
    assert_eq!(a, b);
}
