use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], data_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sharedws"));
    cmd.args(args).env_remove("SHAREDWS_DATA");
    if let Some(root) = data_root {
        cmd.env("SHAREDWS_DATA", root);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tri");
    let o = run(&["generate", "--task", "triangles", "--n", "20", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train.swds").exists() && out.join("test.swds").exists());
    assert!(stdout(&o).contains("train 20 records"));
    assert!(stdout(&o).contains("test 4 records"));

    let o = run(&["generate", "--task", "copy", "--n", "5"], Some(dir.path()));
    assert_eq!(code(&o), 0);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    // Bad configuration, caught before any data is generated.
    let o = run(&["train", "--host", "tr_hsw", "--out", d, "--set", "task.n_train=4"], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("topk"));
    let o = run(&["train", "--host", "nope", "--out", d], None);
    assert_eq!(code(&o), 1);
    let o = run(&["generate", "--task", "triangles", "--n", "2", "--image-size", "48", "--out", d], None);
    assert_eq!(code(&o), 1);
    // Missing files are I/O failures.
    let o = run(&["eval", "--checkpoint", &format!("{d}/missing.ckpt")], None);
    assert_eq!(code(&o), 3);
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = run(&["eval", "--checkpoint", &format!("{d}/junk.ckpt")], None);
    assert_eq!(code(&o), 3);
    // Usage errors and help.
    assert_eq!(code(&run(&["frobnicate"], None)), 1);
    assert_eq!(code(&run(&["--help"], None)), 0);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let o = run(&["gradcheck", "--host", "tr,tr_hsw,rims_sw,tims_sw"], None);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).matches(" pass ").count(), 4);
    let o = run(&["gradcheck", "--host", "tr_ssw", "--inject-fault", "softmax"], None);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn bench_writes_monotone_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = run(
        &["bench", "--ns", "16,128,1024", "--repeats", "5", "--min-run-ms", "5", "--out", csv.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["mechanism", "n_s", "n_m", "d", "flops_analytic", "wall_ns", "bytes_touched"] {
        assert!(header.contains(&col), "missing {col} in {header:?}");
    }
    let [mi, ni, wi] = ["mechanism", "n_s", "wall_ns"].map(|c| header.iter().position(|h| *h == c).unwrap());
    for mech in ["pairwise", "workspace"] {
        let rows: Vec<(usize, f64)> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|r| r[mi] == mech)
            .map(|r| (r[ni].parse().unwrap(), r[wi].parse().unwrap()))
            .collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{mech}: {rows:?}");
    }
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let r = run_dir.to_str().unwrap();
    let o = run(
        &[
            "train", "--preset", "smoke", "--set", "task.n_train=40", "--set", "task.n_test=10", "--epochs", "2", "--out", r,
            "--quiet",
        ],
        Some(dir.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let final_test: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(final_test["n"], 10);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs_run"], 2);
    assert_eq!(manifest["config"]["task"]["n_train"], 40);
    assert!(!manifest["notes"].as_array().unwrap().is_empty());
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 4);

    let ck = run_dir.join("last.ckpt");
    let per_sample = dir.path().join("samples.csv");
    let o = run(
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--per-sample", per_sample.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(metrics, final_test);
    assert_eq!(std::fs::read_to_string(&per_sample).unwrap().lines().count(), 11);

    let dump = dir.path().join("dump");
    let o = run(
        &["dump-attn", "--checkpoint", ck.to_str().unwrap(), "--index", "3", "--out", dump.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let attn = std::fs::read_to_string(dump.join("attention.csv")).unwrap();
    assert!(attn.starts_with("stage,step,slot,specialist,weight"));
    assert!(attn.contains(",write,") && attn.contains(",broadcast,"));
}
