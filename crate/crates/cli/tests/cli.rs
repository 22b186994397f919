use std::path::Path;
use std::process::{Command, Output};

fn streamrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_TRAIN: &str = "epochs = 1\nrefresh_interval = 1\n\n[model]\nd = 16\nd_ff = 16\n";

fn write_csv(dir: &Path) -> std::path::PathBuf {
    let mut text = String::from("user,item,timestamp\n");
    for t in 0..40u64 {
        for u in 0..3 {
            text += &format!("u{u},i{},{}\n", (t * 7 + u) % 11, t * 10 + u);
        }
    }
    let path = dir.join("log.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let out = streamrec(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("prepare"));
}

#[test]
fn prepare_splits_a_csv_into_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path());
    let out_dir = dir.path().join("blocks");
    let out = streamrec(&["prepare", "--input", s(&csv), "--blocks", "4", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let blocks = streamrec::datastream::read_blocks(&out_dir).unwrap();
    assert_eq!(blocks.len(), 4);
    assert_eq!(blocks.iter().map(|b| b.n_interactions).sum::<usize>(), 120);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = streamrec(&[
        "prepare",
        "--input",
        s(&dir.path().join("nope.csv")),
        "--blocks",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn blocks_and_boundaries_together_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path());
    let out = streamrec(&[
        "prepare", "--input", s(&csv), "--blocks", "2", "--boundaries", "100", "--out", s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = streamrec(&[
        "generate", "--out", s(&data), "--users", "20", "--items", "40", "--blocks", "2", "--seed", "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run = dir.path().join("run");
    let metrics_csv = dir.path().join("metrics.csv");
    let out = streamrec(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run), "--csv", s(&metrics_csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["run.json", "config.toml", "train_log.jsonl", "metrics.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(&metrics_csv).unwrap().lines().count(), 3);
    let ckpt = run.join("checkpoints/state_block_002.bin");
    assert!(ckpt.is_file());

    let out = streamrec(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--probe-active", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let first: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(first["block"], 2);

    let pools = dir.path().join("pools.json");
    let out = streamrec(&["export-pools", "--checkpoint", s(&ckpt), "--out", s(&pools)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&pools).unwrap()).unwrap();
    assert!(v.is_object());

    let out = streamrec(&[
        "train", "--data", s(&data), "--out", s(&run), "--resume", s(&ckpt), "--regime", "full_batch",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_regime_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&streamrec(&["generate", "--out", s(&data), "--users", "10", "--items", "30", "--blocks", "2"])), 0);
    let out = streamrec(&["train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--regime", "sometimes"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_runs_one_variant_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&streamrec(&["generate", "--out", s(&data), "--users", "16", "--items", "40", "--blocks", "2"])), 0);
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let out_dir = dir.path().join("abl");
    let out = streamrec(&[
        "ablate", "--data", s(&data), "--config", s(&cfg), "--toggles", "csn", "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.jsonl")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn bench_reports_every_length_and_rejects_bad_input() {
    let out = streamrec(&["bench", "--mechanisms", "csa,linear", "--lengths", "16,32", "--reps", "1", "--d", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    assert!(lines.iter().filter(|v| v["n"].is_number()).count() >= 4);

    assert_eq!(code(&streamrec(&["bench", "--mechanisms", "fancy"])), 2);
    assert_eq!(code(&streamrec(&["bench", "--reps", "0", "--lengths", "8"])), 2);
}
