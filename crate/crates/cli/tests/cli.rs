use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn seqrec() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqrec"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    seqrec().args(args).output().expect("spawn seqrec")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn prepare(dir: &Path, users: usize) -> PathBuf {
    let out = dir.join("data");
    let o = run(&[
        "prepare",
        "--synthetic",
        "--users",
        &users.to_string(),
        "--items",
        "40",
        "--seq-len",
        "20",
        "--max-len",
        "15",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    out.join("dataset.json")
}

fn write_config(dir: &Path, max_epochs: usize) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(
        &p,
        format!(
            "dataset = \"data/dataset.json\"\nrun_dir = \"runs/a\"\n\n[model]\nd = 16\nn = 15\nlayers = 1\n\
             learning_rate = 0.005\nseed = 3\n\n[train]\nbatch_size = 32\nmax_epochs = {max_epochs}\npatience = 100\n"
        ),
    )
    .unwrap();
    p
}

fn train(config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

/// Log lines without the wall-clock field.
fn log_without_time(run_dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(run_dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect()
}

#[test]
fn help_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    for cmd in ["", "prepare", "train", "eval", "export-attention", "bench", "table"] {
        let mut args: Vec<&str> = cmd.split_whitespace().collect();
        args.push("--help");
        let o = run(&args);
        assert!(o.status.success());
        let got = String::from_utf8(o.stdout).unwrap();
        let name = if cmd.is_empty() { "seqrec" } else { cmd };
        let path = dir.join(format!("{name}.txt"));
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &got).unwrap();
        } else {
            let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
            assert_eq!(got, want, "help for `{name}` changed; rerun with UPDATE_SNAPSHOTS=1 if intended");
        }
    }
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = run(&["prepare", "--input", missing.to_str().unwrap(), "--output", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    let o = run(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--checkpoint", "x", "--mode", "sampled:0"]).status.code(), Some(1));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "dataset = \"d.json\"\nrun_dir = \"r\"\n[model]\nwidth = 3\n").unwrap();
    let o = train(&cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("width"), "{}", text(&o));
}

#[test]
fn prepare_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    let mut body = String::from("user_id,item_id,timestamp\n");
    for u in 0..8 {
        for t in 0..7 {
            body.push_str(&format!("u{u},i{},{t}\n", (u + t) % 6));
        }
    }
    body.push_str("broken row\n");
    fs::write(&csv, body).unwrap();
    let out = dir.path().join("data");
    let o = run(&["prepare", "--input", csv.to_str().unwrap(), "--output", out.to_str().unwrap(), "--max-len", "5"]);
    assert_eq!(o.status.code(), Some(1), "one bad row in 57 exceeds the default tolerance");
    let o = run(&[
        "prepare",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--max-len",
        "5",
        "--max-malformed",
        "0.05",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["users"], 8);
    assert_eq!(stats["items"], 6);
    assert_eq!(stats["interactions"], 56);
    assert_eq!(stats["malformed_rows"], 1);
    assert!(stats.get("planted_rule_frequency").is_none());
}

#[test]
fn synthetic_stats_report_the_planted_rule() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 300);
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("data/stats.json")).unwrap()).unwrap();
    let f = stats["planted_rule_frequency"].as_f64().unwrap();
    assert!((f - 0.8).abs() < 0.03, "{f}");
    for key in ["users", "items", "interactions"] {
        assert!(stats[key].as_u64().unwrap() > 0);
    }
}

#[test]
fn train_eval_export_and_table() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 120);
    let cfg = write_config(dir.path(), 3);
    let o = train(&cfg, &["--set", "model.mechanism=simp"]);
    assert!(o.status.success(), "{}", text(&o));
    let run_dir = dir.path().join("runs/a");
    for f in ["config.toml", "run.json", "log.jsonl", "trainer.json", "best.json", "metrics.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let info: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 3);
    assert_eq!(info["dataset_sha256"].as_str().unwrap().len(), 64);

    // an existing run is not silently overwritten
    assert_eq!(train(&cfg, &["--set", "model.mechanism=simp"]).status.code(), Some(1));

    let best = run_dir.join("best.json");
    let o = run(&["eval", "--checkpoint", best.to_str().unwrap(), "--topn", "1,5", "--mode", "sampled:10"]);
    assert!(o.status.success(), "{}", text(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("metrics-test.json")).unwrap()).unwrap();
    assert_eq!(m["ranking_mode"], "sampled:10");
    let at = m["at"].as_object().unwrap();
    assert_eq!(at["1"]["recall"], at["1"]["ndcg"]);

    let att = dir.path().join("att");
    let o = run(&["export-attention", "--checkpoint", best.to_str().unwrap(), "--user", "u0", "--output", att.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["A.csv", "A.png", "B.csv", "B.png", "weights.csv", "weights.png", "items.json"] {
        assert!(att.join(f).is_file(), "{f}");
    }
    let rows: Vec<Vec<f64>> = fs::read_to_string(att.join("weights.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 15);
    for (k, r) in rows.iter().enumerate() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r[k + 1..].iter().all(|&v| v == 0.0));
    }
    let o = run(&["export-attention", "--checkpoint", best.to_str().unwrap(), "--user", "nobody", "--output", "x"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["table", run_dir.join("metrics.json").to_str().unwrap(), run_dir.join("metrics-test.json").to_str().unwrap()]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("Nd@5") && out.lines().any(|l| l.starts_with("a ")) && out.contains("metrics-test"));
}

#[test]
fn configs_differ_only_in_the_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 60);
    let cfg = write_config(dir.path(), 1);
    for (mech, out) in [("none", "runs/none"), ("simp", "runs/simp")] {
        let o = train(&cfg, &["--set", &format!("model.mechanism={mech}"), "--set", &format!("run_dir={out}")]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let load = |p: &str| -> toml::Table { fs::read_to_string(dir.path().join(p)).unwrap().parse().unwrap() };
    let (mut a, mut b) = (load("runs/none/config.toml"), load("runs/simp/config.toml"));
    assert_ne!(a["model"]["mechanism"], b["model"]["mechanism"]);
    for t in [&mut a, &mut b] {
        t.remove("run_dir");
        t["model"].as_table_mut().unwrap().remove("mechanism");
    }
    assert_eq!(a, b);
}

#[test]
fn reruns_and_resumed_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 600);
    let cfg = write_config(dir.path(), 25);
    for out in ["runs/first", "runs/second"] {
        let o = train(&cfg, &["--set", &format!("run_dir={out}")]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let first = dir.path().join("runs/first");
    let second = dir.path().join("runs/second");
    assert_eq!(log_without_time(&first).len(), 25);
    assert_eq!(log_without_time(&first), log_without_time(&second));
    assert_eq!(fs::read(first.join("metrics.json")).unwrap(), fs::read(second.join("metrics.json")).unwrap());

    // kill a third run after a couple of epochs, then resume it
    let killed = dir.path().join("runs/killed");
    let mut child = seqrec()
        .args(["train", "--config", cfg.to_str().unwrap(), "--set", "run_dir=runs/killed"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let completed = loop {
        if let Ok(bytes) = fs::read(killed.join("trainer.json")) {
            let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            let epoch = v["state"]["epoch"].as_u64().unwrap();
            if epoch >= 2 {
                break epoch;
            }
        }
        assert!(start.elapsed() < Duration::from_secs(120), "training never checkpointed");
        std::thread::sleep(Duration::from_millis(2));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(completed < 25, "run finished before it could be interrupted");
    assert!(!killed.join("best.json").exists());

    let o = train(&cfg, &["--set", "run_dir=runs/killed", "--resume"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(log_without_time(&killed), log_without_time(&first));
    assert_eq!(fs::read(killed.join("best.json")).unwrap(), fs::read(first.join("best.json")).unwrap());

    // resuming under a different config is refused
    let o = train(&cfg, &["--set", "run_dir=runs/killed", "--set", "model.d=8", "--resume"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_reports_a_tampered_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = run(&["bench", "--only", "1,7", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let results: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 2);
    assert!(results[0]["seconds"].as_f64().is_some());

    let o = run(&["bench", "--only", "1", "--tamper-gradient"]);
    assert_eq!(o.status.code(), Some(2));
    let out = text(&o);
    assert!(out.contains("[FAIL]  1. gradient integrity"), "{out}");
}
