use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bitrl::checkpoint::Checkpoint;
use serde_json::Value;

fn bitrl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitrl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "total_steps = 600\nrollout_length = 200\nminibatch = 50\neval_every = 600\neval_episodes = 2\n";

fn train_tiny(dir: &Path, out: &str, seed: &str) -> Output {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    bitrl(
        &[
            "train", "--env", "cartpole", "--config", "tiny.cfg", "--seed", seed, "--out", out,
        ],
        dir,
    )
}

#[test]
fn quantized_default_backbone_is_ten_times_smaller() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&bitrl(&["init", "--out", "fp.btrl"], d.path())), 0);
    let q = bitrl(
        &["quantize", "--in", "fp.btrl", "--out", "q.btrl"],
        d.path(),
    );
    assert_eq!(code(&q), 0, "{}", String::from_utf8_lossy(&q.stderr));
    let a = fs::metadata(d.path().join("fp.btrl")).unwrap().len();
    let b = fs::metadata(d.path().join("q.btrl")).unwrap().len();
    assert!(a as f64 / b as f64 >= 10.0, "{a} / {b}");
    assert!(stdout(&q).contains("ratio"));
    let m: Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("q.btrl.manifest.json")).unwrap())
            .unwrap();
    for key in [
        "command",
        "config_hash",
        "seed",
        "git_describe",
        "timestamp",
    ] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn requantizing_a_ternary_checkpoint_is_lossless() {
    let d = tempfile::tempdir().unwrap();
    let small = [
        "--layers",
        "2",
        "--d-model",
        "64",
        "--heads",
        "2",
        "--ffn-dim",
        "128",
    ];
    let mut args = vec!["init", "--out", "fp.btrl"];
    args.extend(small);
    assert_eq!(code(&bitrl(&args, d.path())), 0);
    assert_eq!(
        code(&bitrl(
            &["quantize", "--in", "fp.btrl", "--out", "q.btrl"],
            d.path()
        )),
        0
    );
    let again = bitrl(
        &["quantize", "--in", "q.btrl", "--out", "q2.btrl"],
        d.path(),
    );
    assert_eq!(code(&again), 0);
    let rows: Vec<String> = stdout(&again)
        .lines()
        .filter(|l| l.starts_with("block") || l.starts_with("total"))
        .map(String::from)
        .collect();
    assert_eq!(rows.len(), 13);
    for row in rows {
        let eps: f64 = row.split_whitespace().nth(3).unwrap().parse().unwrap();
        assert!(eps < 1e-12, "{row}");
    }
}

#[test]
fn empty_or_corrupt_checkpoints_exit_with_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    Checkpoint::default()
        .save(&d.path().join("empty.btrl"))
        .unwrap();
    let o = bitrl(
        &["quantize", "--in", "empty.btrl", "--out", "x.btrl"],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    fs::write(d.path().join("junk.btrl"), b"BTRL not really").unwrap();
    assert_eq!(
        code(&bitrl(
            &["quantize", "--in", "junk.btrl", "--out", "x.btrl"],
            d.path()
        )),
        2
    );
    assert_eq!(
        code(&bitrl(
            &["eval", "--ckpt", "junk.btrl", "--env", "cartpole"],
            d.path()
        )),
        2
    );
    assert_eq!(
        code(&bitrl(
            &["eval", "--ckpt", "missing.btrl", "--env", "cartpole"],
            d.path()
        )),
        2
    );
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&bitrl(&["train", "--bogus"], d.path())), 1);
    assert_eq!(code(&bitrl(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&bitrl(&["verify", "--suite", "nope"], d.path())), 1);
    assert_eq!(code(&bitrl(&["bench", "--dims", "0x4"], d.path())), 1);
    assert_eq!(
        code(&bitrl(&["train", "--env", "pong", "--out", "r"], d.path())),
        1
    );
    fs::write(d.path().join("bad.cfg"), "learning_rate = 1\n").unwrap();
    let o = bitrl(
        &[
            "train", "--env", "cartpole", "--config", "bad.cfg", "--out", "r",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 1);
    assert_eq!(code(&bitrl(&["--help"], d.path())), 0);
}

#[test]
fn train_eval_and_report_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let o = train_tiny(d.path(), "run", "4");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("policy_lr not set, using default 0.0003"),
        "{err}"
    );
    for f in [
        "metrics.jsonl",
        "evals.jsonl",
        "checkpoint.btrl",
        "manifest.json",
        "config.txt",
    ] {
        assert!(d.path().join("run").join(f).exists(), "missing {f}");
    }
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["env"], "cartpole");

    let e = bitrl(
        &[
            "eval",
            "--ckpt",
            "run/checkpoint.btrl",
            "--env",
            "cartpole",
            "--episodes",
            "3",
            "--seed",
            "1",
        ],
        d.path(),
    );
    assert_eq!(code(&e), 0);
    let rep: Value = serde_json::from_str(stdout(&e).trim()).unwrap();
    assert_eq!(rep["returns"].as_array().unwrap().len(), 3);
    let e = bitrl(
        &["eval", "--ckpt", "run/checkpoint.btrl", "--env", "acrobot"],
        d.path(),
    );
    assert_eq!(code(&e), 2);

    let r = bitrl(&["report", "--runs", "run", "--json"], d.path());
    assert_eq!(code(&r), 0);
    let s: Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert_eq!(s["final_return"]["std"], 0.0);
    for row in s["phases"].as_array().unwrap() {
        for col in ["entropy", "value_loss", "grad_variance"] {
            assert_eq!(row[col]["std"], 0.0);
        }
    }
}

#[test]
fn same_seed_gives_identical_outputs() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(d.path(), "a", "9")), 0);
    assert_eq!(code(&train_tiny(d.path(), "b", "9")), 0);
    assert_eq!(code(&train_tiny(d.path(), "c", "10")), 0);
    let read = |run: &str, f: &str| fs::read(d.path().join(run).join(f)).unwrap();
    for f in [
        "metrics.jsonl",
        "evals.jsonl",
        "checkpoint.btrl",
        "config.txt",
    ] {
        assert_eq!(read("a", f), read("b", f), "{f} differs");
    }
    assert_ne!(read("a", "metrics.jsonl"), read("c", "metrics.jsonl"));
    let hash = |run: &str| {
        let m: Value = serde_json::from_slice(&read(run, "manifest.json")).unwrap();
        m["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("a"), hash("b"));
    assert_ne!(hash("a"), hash("c"));
}

#[test]
fn report_over_five_seeds_matches_recomputation() {
    let d = tempfile::tempdir().unwrap();
    let mut finals = Vec::new();
    let mut names = Vec::new();
    for seed in 0..5 {
        let name = format!("s{seed}");
        let o = train_tiny(d.path(), &name, &seed.to_string());
        assert_eq!(code(&o), 0);
        let text = fs::read_to_string(d.path().join(&name).join("evals.jsonl")).unwrap();
        let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        finals.push(last["mean_return"].as_f64().unwrap());
        names.push(name);
    }
    let mut args = vec!["report", "--runs"];
    args.extend(names.iter().map(String::as_str));
    let table = stdout(&bitrl(&args, d.path()));
    let mean = finals.iter().sum::<f64>() / 5.0;
    let sd = (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!(
        table.contains(&format!("final return: {mean:.1} ± {sd:.1}")),
        "{table}"
    );
    assert!(table.contains("initial (0-20%)") && table.contains("final (80-100%)"));
}

#[test]
fn forced_divergence_exits_with_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("div.cfg"),
        "policy_lr = 1e300\nvalue_lr = 1e300\nrollout_length = 64\nminibatch = 32\ntotal_steps = 4000\n",
    )
    .unwrap();
    let o = bitrl(
        &[
            "train", "--env", "cartpole", "--config", "div.cfg", "--out", "r",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(d.path().join("r/metrics.jsonl").exists());
}

#[test]
fn quick_verification_suite_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = bitrl(&["verify", "--suite", "lemma1", "--quick"], d.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let rep: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(rep["suite"], "lemma1");
    assert_eq!(rep["passed"], true);
}

#[test]
fn bench_emits_one_json_line_per_shape() {
    let d = tempfile::tempdir().unwrap();
    let o = bitrl(&["bench", "--dims", "64,32x128", "--iters", "20"], d.path());
    assert_eq!(code(&o), 0);
    let lines: Vec<Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        (lines[1]["rows"].as_u64(), lines[1]["cols"].as_u64()),
        (Some(32), Some(128))
    );
    for l in &lines {
        for key in ["median_ns", "p95_ns", "speedup"] {
            assert!(l[key].as_f64().unwrap() > 0.0);
        }
    }
}
