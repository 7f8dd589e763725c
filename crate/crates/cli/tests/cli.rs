use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqrec"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SEQREC_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesize, train, evaluate, serve three days and query, all under `dir`.
fn pipeline(dir: &Path) {
    let cfg = tiny();
    let data = dir.join("data");
    let ckpt = dir.join("run/model.sqm");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out-ckpt",
        s(&ckpt),
        "--set",
        "train.steps=20",
    ]);
    let eval = data.join("eval.sqr");
    for ext in ["json", "csv"] {
        ok(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--dataset",
            s(&eval),
            "--protocol",
            "once,daily,realtime",
            "--index-size",
            "500",
            "--out",
            s(&dir.join(format!("eval.{ext}"))),
        ]);
    }
    for day in 31..34 {
        let out = dir.join(format!("store{day}.sqe"));
        let mut args = vec![
            "pipeline".to_string(),
            "--ckpt".into(),
            s(&ckpt).into(),
            "--dataset".into(),
            s(&eval).into(),
            "--store-out".into(),
            s(&out).into(),
            "--day".into(),
            day.to_string(),
        ];
        if day > 31 {
            args.push("--store-in".into());
            args.push(s(&dir.join(format!("store{}.sqe", day - 1))).into());
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&args);
    }
    let index = dir.join("index.sqh");
    ok(&[
        "index",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&data.join("corpus.sqc")),
        "--out",
        s(&index),
    ]);
    ok(&[
        "query",
        "--index",
        s(&index),
        "--store",
        s(&dir.join("store33.sqe")),
        "--ckpt",
        s(&ckpt),
        "--k",
        "5",
        "--out",
        s(&dir.join("query.csv")),
    ]);
}

fn without_wall_clock(metrics: &str) -> String {
    metrics
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn end_to_end_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    let query = std::fs::read_to_string(a.path().join("query.csv")).unwrap();
    let mut lines = query.lines();
    assert_eq!(lines.next(), Some("user_id,rank,pin_id,distance"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty() && rows.len() % 5 == 0);

    let csv = std::fs::read_to_string(a.path().join("eval.csv")).unwrap();
    for p in ["once", "daily", "realtime"] {
        assert!(csv.contains(p), "{csv}");
    }

    for f in [
        "data/corpus.sqc",
        "data/train.sqr",
        "data/eval.sqr",
        "data/split.json",
        "run/model.sqm",
        "eval.json",
        "eval.csv",
        "store31.sqe",
        "store33.sqe",
        "index.sqh",
        "query.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let ma = std::fs::read_to_string(a.path().join("run/metrics.csv")).unwrap();
    let mb = std::fs::read_to_string(b.path().join("run/metrics.csv")).unwrap();
    assert_eq!(ma.lines().count(), 21);
    assert_eq!(without_wall_clock(&ma), without_wall_clock(&mb));
}

#[test]
fn seed_override_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    ok(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    let out = bin()
        .args(["synth", "--config", s(&cfg), "--out", s(&dir.path().join("b"))])
        .env("SEQREC_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("a/corpus.sqc")).unwrap();
    let b = std::fs::read(dir.path().join("b/corpus.sqc")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn negatives_report_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    for neg in ["random", "in_batch", "mixed"] {
        for spc in [true, false] {
            let out = dir.path().join(format!("{neg}_{spc}"));
            ok(&[
                "experiment",
                "--config",
                s(&cfg),
                "--out",
                s(&out),
                "--set",
                "train.steps=2",
                "--set",
                &format!("train.negatives=\"{neg}\""),
                "--set",
                &format!("train.spc={spc}"),
                "--set",
                "eval.protocols=[\"once\"]",
            ]);
            assert!(out.join("run.json").exists());
        }
    }
    let prefix = dir.path().join("neg");
    let stdout = ok(&[
        "report",
        "--runs",
        s(dir.path()),
        "--table",
        "negatives",
        "--out",
        s(&prefix),
    ]);
    assert!(stdout.contains("rows=6"), "{stdout}");
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let svg = std::fs::read_to_string(prefix.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

fn assert_error(args: &[&str], code: i32, kind: &str) {
    let out = run(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} message=\"")), "{err}");
}

#[test]
fn failures_exit_with_one_parseable_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    assert_error(&["frobnicate"], 2, "usage");
    assert_error(&["synth", "--out", s(dir.path())], 2, "usage");
    assert_error(&["synth", "--config", "/no/such.toml", "--out", s(dir.path())], 2, "config");
    assert_error(
        &["synth", "--config", s(&cfg), "--set", "train.stepz=1", "--out", s(dir.path())],
        2,
        "config",
    );
    assert_error(&["report", "--runs", s(dir.path()), "--table", "nope"], 2, "config");

    let bad = dir.path().join("bad.sqm");
    std::fs::write(&bad, b"not a model").unwrap();
    assert_error(
        &["index", "--ckpt", s(&bad), "--corpus", s(&bad), "--out", s(&dir.path().join("i"))],
        1,
        "decode",
    );
    assert_error(
        &["eval", "--ckpt", "/no/model", "--dataset", "/no/data", "--out", "x.json"],
        1,
        "precondition",
    );
}
