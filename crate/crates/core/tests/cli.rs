use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn edtrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edtrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = edtrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn graph_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/stitch_world.graph")
}

#[test]
fn staged_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let graph = graph_file();
    let graph = graph.to_str().unwrap();
    ok(d, &["gen-data", "--graph", graph, "--n", "3", "--out", "data.jsonl"]);
    ok(d, &["fit-q", "--dataset", "data.jsonl", "--out", "q.txt"]);
    ok(
        d,
        &[
            "relabel",
            "--dataset",
            "data.jsonl",
            "--qtable",
            "q.txt",
            "--out",
            "rl.jsonl",
        ],
    );
    assert!(std::fs::read_to_string(d.join("rl.jsonl"))
        .unwrap()
        .contains("rtg_relabel"));
    ok(
        d,
        &[
            "pretrain",
            "--dataset",
            "rl.jsonl",
            "--graph",
            graph,
            "--iters",
            "20",
            "--K",
            "2",
            "--out",
            "pre.ckpt",
        ],
    );
    ok(
        d,
        &[
            "finetune",
            "--graph",
            graph,
            "--ckpt",
            "pre.ckpt",
            "--dataset",
            "rl.jsonl",
            "--rounds",
            "2",
            "--g-online",
            "2",
            "--K",
            "2",
            "--out",
            "ft.ckpt",
            "--metrics",
            "m.jsonl",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["round", "mean_return", "entropy", "lambda", "nll"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }
    let out = ok(
        d,
        &[
            "eval",
            "--graph",
            graph,
            "--ckpt",
            "ft.ckpt",
            "--dataset",
            "data.jsonl",
            "--episodes",
            "5",
            "--out",
            "ev.jsonl",
        ],
    );
    assert!(out.contains("mean_return"), "{out}");
    ok(
        d,
        &["rank-eval", "--ckpt", "ft.ckpt", "--dataset", "data.jsonl", "--k", "3"],
    );
}

#[test]
fn ratings_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("r.csv"),
        "user,item,rating,timestamp\nu1,a,5,2\nu1,b,2,1\nu2,a,4,1\nu2,c,3.75,2\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "gen-data",
            "--ratings",
            "r.csv",
            "--max-rating",
            "5",
            "--out",
            "log.jsonl",
        ],
    );
    let text = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let rewards: Vec<Vec<f64>> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("rewards").cloned())
        .map(|r| serde_json::from_value(r).unwrap())
        .collect();
    // 3.75 is exactly 0.75·5 and does not count as a click
    assert_eq!(rewards, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
}

#[test]
fn run_without_graph_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.cfg"), "seed = 1\n").unwrap();
    let out = edtrec(tmp.path(), &["--config", "c.cfg", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph"));
}

#[test]
fn grad_check_reports_each_primitive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["grad-check", "--seeds", "2", "--per-param", "4"]);
    assert!(out.lines().count() > 5);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn bad_arguments_fail() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(
        !edtrec(tmp.path(), &["fit-q", "--dataset", "missing.jsonl", "--out", "q"])
            .status
            .success()
    );
    assert!(!edtrec(tmp.path(), &["finetune", "--relabel", "sometimes"])
        .status
        .success());
}
