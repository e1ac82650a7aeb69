//! End-to-end runs of the `leakproto` binary on a small corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leakproto::eval::{eval_closed, Ranker};
use leakproto::leaksim::Dataset;
use leakproto::training::Checkpoint;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_leakproto"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct Pipeline {
    data: PathBuf,
    run: PathBuf,
    eval: PathBuf,
    report: PathBuf,
}

fn pipeline(root: &Path) -> Pipeline {
    let pl = Pipeline {
        data: root.join("data"),
        run: root.join("run"),
        eval: root.join("eval"),
        report: root.join("report"),
    };
    ok(&["simulate", "--out", p(&pl.data), "--seed", "11", "--classes", "3", "--open", "1", "--per-class", "24", "--open-per-class", "8", "--strength", "0.6"]);
    ok(&["train", "--dataset", p(&pl.data), "--out", p(&pl.run), "--epochs", "3", "--batch-size", "8", "--seed", "5"]);
    let ckpt = pl.run.join("checkpoint.plck");
    let common = ["--dataset", p(&pl.data), "--checkpoint", p(&ckpt), "--out", p(&pl.eval)];
    ok(&[&["eval-closed"], &common[..], &["--perturb", "0"]].concat());
    ok(&[&["eval-closed"], &common[..], &["--perturb", "2", "--ranker", "posterior"]].concat());
    ok(&[&["eval-openset"], &common[..]].concat());
    ok(&[&["explain"], &common[..], &["--limit", "4", "--top-k", "3"]].concat());
    ok(&["report", "--dataset", p(&pl.data), "--checkpoint", p(&ckpt), "--out", p(&pl.report), "--bins", "20"]);
    pl
}

#[test]
fn pipeline_outputs_are_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = pipeline(a.path());
    let data_before = snapshot(&pa.data);

    for f in ["manifest.json", "latents.plnk"] {
        assert!(pa.data.join(f).is_file(), "{f}");
    }
    for f in ["checkpoint.plck", "train_log.jsonl", "timing.jsonl", "train_report.json"] {
        assert!(pa.run.join(f).is_file(), "{f}");
    }
    for f in [
        "closed_maha_p0.json",
        "closed_maha_p0.csv",
        "closed_posterior_p2.json",
        "openset_off.json",
        "openset_on.json",
        "openset_asymmetric.json",
        "openset_asymmetric_scores.csv",
        "openset.csv",
        "explain.jsonl",
    ] {
        assert!(pa.eval.join(f).is_file(), "{f}");
    }
    for f in ["report.json", "closed_auc.csv", "openset.csv", "per_step_auc.csv", "plots/scores_on.svg", "plots/per_step_auc.svg", "plots/perturbation_auc.svg"] {
        assert!(pa.report.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(pa.run.join("train_log.jsonl")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(pa.eval.join("explain.jsonl")).unwrap().lines().count(), 5);

    // the open-set report carries exactly the three metrics, plus provenance
    let v: serde_json::Value = serde_json::from_slice(&fs::read(pa.eval.join("openset_asymmetric.json")).unwrap()).unwrap();
    let keys: Vec<&str> = v["metrics"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["auroc", "eer", "ovl"]);
    assert_eq!(v["mode"], "asymmetric");
    for k in ["config_digest", "dataset_digest", "dataset_seed", "train_seed", "init_seed"] {
        assert!(!v["provenance"][k].is_null(), "{k}");
    }
    assert_eq!(v["provenance"]["dataset_seed"], 11);
    assert_eq!(v["provenance"]["train_seed"], 5);

    // --perturb 0 is the plain unperturbed evaluation
    let closed: serde_json::Value = serde_json::from_slice(&fs::read(pa.eval.join("closed_maha_p0.json")).unwrap()).unwrap();
    let ds = Dataset::load(&pa.data).unwrap();
    let ck = Checkpoint::load(pa.run.join("checkpoint.plck")).unwrap();
    let direct = eval_closed(&ck.model, &ds, Ranker::Maha, 0).unwrap();
    assert_eq!(closed["evaluation"]["macro_auc"].as_f64().unwrap(), direct.macro_auc);
    assert_eq!(closed["evaluation"]["samples"].as_u64().unwrap() as usize, ds.closed(leakproto::leaksim::Split::Test, 0).len());

    // inputs untouched
    assert_eq!(snapshot(&pa.data), data_before);

    // identical seeds → identical bytes, wall-clock timings and plots aside
    let pb = pipeline(b.path());
    assert_eq!(snapshot(&pa.data), snapshot(&pb.data));
    for (dir_a, dir_b) in [(&pa.run, &pb.run), (&pa.eval, &pb.eval), (&pa.report, &pb.report)] {
        let (sa, sb) = (snapshot(dir_a), snapshot(dir_b));
        assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
        for (k, bytes) in &sa {
            if k.ends_with("timing.jsonl") || k.extension().is_some_and(|e| e == "svg") {
                continue;
            }
            assert!(bytes == &sb[k], "{} differs between runs", k.display());
        }
    }
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    ok(&["simulate", "--out", p(&data), "--seed", "2", "--classes", "3", "--open", "1", "--per-class", "16", "--open-per-class", "4"]);
    let full = root.path().join("full");
    ok(&["train", "--dataset", p(&data), "--out", p(&full), "--epochs", "2", "--batch-size", "8"]);

    // one epoch, then resume the remaining one from a config that asks for two
    let cfg = root.path().join("train.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "batch_size": 8}}"#).unwrap();
    let first = root.path().join("first");
    let trainer_cfg = leakproto::training::TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let ds = Dataset::load(&data).unwrap();
    let mut t = leakproto::training::Trainer::new(&ds, leakproto::model::ModelConfig::new(3), trainer_cfg).unwrap();
    t.run_epoch().unwrap();
    fs::create_dir_all(&first).unwrap();
    t.checkpoint().save(first.join("checkpoint.plck")).unwrap();

    let resumed = root.path().join("resumed");
    ok(&["train", "--dataset", p(&data), "--out", p(&resumed), "--resume", p(&first.join("checkpoint.plck"))]);
    assert_eq!(fs::read(full.join("checkpoint.plck")).unwrap(), fs::read(resumed.join("checkpoint.plck")).unwrap());
    assert_eq!(fs::read(full.join("train_log.jsonl")).unwrap(), fs::read(resumed.join("train_log.jsonl")).unwrap());

    // the config-file route reaches the same result as flags
    let via_cfg = root.path().join("via_cfg");
    ok(&["train", "--dataset", p(&data), "--out", p(&via_cfg), "--config", p(&cfg)]);
    assert_eq!(fs::read(full.join("checkpoint.plck")).unwrap(), fs::read(via_cfg.join("checkpoint.plck")).unwrap());
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "expected one line, got {err:?}");
    err
}

#[test]
fn failures_map_to_error_classes() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("missing");

    let out = run(&["eval-closed", "--dataset", p(&missing), "--checkpoint", p(&missing), "--out", p(root.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error[data]:"));

    let out = run(&["simulate", "--out", p(&root.path().join("x")), "--strength", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[config]:"));

    let out = run(&["eval-closed", "--perturb", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[config]:"));

    let bad = root.path().join("gen.json");
    fs::write(&bad, r#"{"seed": 1, "unknown_key": true}"#).unwrap();
    let out = run(&["simulate", "--out", p(&root.path().join("y")), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("unknown_key"));

    // corrupt checkpoint
    let data = root.path().join("data");
    ok(&["simulate", "--out", p(&data), "--classes", "2", "--open", "1", "--per-class", "8", "--open-per-class", "2"]);
    let ck = root.path().join("bad.plck");
    fs::write(&ck, b"PLCK garbage").unwrap();
    let out = run(&["eval-openset", "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&root.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    error_line(&out);

    // output path that is a file
    let out = run(&["simulate", "--out", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    // unwritable output location
    let out = run(&["simulate", "--out", "/proc/leakproto-cannot-write", "--per-class", "8", "--open-per-class", "2"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_line(&out).starts_with("error[io]:"));

    assert!(run(&["--help"]).status.success());
}
