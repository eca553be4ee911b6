//! End-to-end tests against the compiled `qekit` binary: exit codes, the
//! full pipeline, and byte-level determinism of every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qekit"))
        .args(args)
        .current_dir(dir)
        .env_remove("QEKIT_LOG")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32, needle: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(needle), "stderr should mention `{needle}`: {stderr}");
}

/// Every file under `dir`, keyed by relative path.
fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn synth_small(dir: &Path, seed: &str) {
    assert_ok(&qekit(
        dir,
        &[
            "synth", "--seed", seed, "--out", "data", "--n-train", "60", "--n-dev", "20",
            "--n-test", "20", "--d", "8", "--l", "2", "--vocab-size", "60", "--max-len", "6",
        ],
    ));
}

/// synth → train ×2 → predict ×2 → ensemble-search ×2 → spanify → score ×3
/// → channel-weights, all inside `dir`.
fn run_pipeline(dir: &Path) {
    synth_small(dir, "11");
    for (seed, out) in [("1", "m1"), ("2", "m2")] {
        assert_ok(&qekit(
            dir,
            &[
                "train", "--seed", seed, "--out", out, "--train-data", "data/train.jsonl",
                "--dev-data", "data/dev.jsonl", "--manifest", "data/hidden/manifest.jsonl",
                "--max-epochs", "3",
            ],
        ));
        let ckpt = format!("{out}/checkpoint.qek");
        assert_ok(&qekit(
            dir,
            &[
                "predict", "--seed", "1", "--out", out, "--dataset", "data/test.jsonl",
                "--manifest", "data/hidden/manifest.jsonl", "--checkpoint", &ckpt,
            ],
        ));
    }
    for task in ["sent", "word"] {
        assert_ok(&qekit(
            dir,
            &[
                "ensemble-search", "--seed", "7", "--out", &format!("ens-{task}"), "--task",
                task, "--gold", "data/test.jsonl", "--pred", "m1=m1/predictions.jsonl",
                "--pred", "m2=m2/predictions.jsonl", "--budget", "8",
            ],
        ));
    }
    assert_ok(&qekit(
        dir,
        &[
            "spanify", "--seed", "1", "--out", "m1", "--dataset", "data/test.jsonl",
            "--pred", "m1/predictions.jsonl",
        ],
    ));
    for (task, pred) in
        [("sent", "m1/predictions.jsonl"), ("word", "m1/predictions.jsonl"), ("span", "m1/spans.jsonl")]
    {
        assert_ok(&qekit(
            dir,
            &[
                "score", "--seed", "1", "--out", &format!("rep-{task}"), "--task", task,
                "--pred", pred, "--gold", "data/test.jsonl",
            ],
        ));
    }
    assert_ok(&qekit(
        dir,
        &["channel-weights", "--seed", "1", "--out", "cw", "--scores", "0.4,1.0,0.75"],
    ));
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = qekit(dir.path(), &["--help"]);
    assert_ok(&out);
    for sub in
        ["synth", "train", "predict", "ensemble-search", "spanify", "channel-weights", "score"]
    {
        let out = qekit(dir.path(), &[sub, "--help"]);
        assert_ok(&out);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed"), "{sub} --help documents --seed");
        assert!(text.contains("--out"), "{sub} --help documents --out");
    }
}

#[test]
fn full_pipeline_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let ta = tree_bytes(a.path());
    let tb = tree_bytes(b.path());
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "same artifact set"
    );
    for (path, bytes) in &ta {
        assert_eq!(bytes, &tb[path], "artifact {path} differs between runs");
    }
    assert!(ta.contains_key("m1/checkpoint.qek"));
    assert!(ta.contains_key("ens-sent/weights.json"));
    assert!(ta.contains_key("rep-span/report.tsv"));
}

#[test]
fn reruns_into_the_same_directory_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let before = tree_bytes(dir.path());
    run_pipeline(dir.path());
    assert_eq!(before, tree_bytes(dir.path()));
}

#[test]
fn missing_seed_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = qekit(dir.path(), &["synth", "--out", "data"]);
    assert_exit(&out, 2, "seed");
}

#[test]
fn invalid_qekit_log_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qekit"))
        .args(["synth", "--seed", "1"])
        .current_dir(dir.path())
        .env("QEKIT_LOG", "verbose")
        .output()
        .unwrap();
    assert_exit(&out, 2, "QEKIT_LOG");
}

#[test]
fn missing_score_exits_two_before_any_training() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    // Strip the score field from the training data.
    let train = dir.path().join("data/train.jsonl");
    let stripped: String = fs::read_to_string(&train)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            v.as_object_mut().unwrap().remove("score");
            format!("{v}\n")
        })
        .collect();
    fs::write(dir.path().join("noscore.jsonl"), stripped).unwrap();
    let out = qekit(
        dir.path(),
        &[
            "train", "--seed", "1", "--out", "run", "--train-data", "noscore.jsonl",
            "--dev-data", "data/dev.jsonl", "--manifest", "data/hidden/manifest.jsonl",
        ],
    );
    assert_exit(&out, 2, "score");
    assert!(!dir.path().join("run/checkpoint.qek").exists(), "no checkpoint written");
    assert!(!dir.path().join("run/history.jsonl").exists(), "no history written");
}

#[test]
fn checkpoint_hidden_dim_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    assert_ok(&qekit(
        dir.path(),
        &[
            "synth", "--seed", "4", "--out", "wide", "--n-train", "8", "--n-dev", "4",
            "--n-test", "4", "--d", "16", "--l", "2", "--vocab-size", "60",
        ],
    ));
    assert_ok(&qekit(
        dir.path(),
        &[
            "train", "--seed", "1", "--out", "run", "--train-data", "data/train.jsonl",
            "--dev-data", "data/dev.jsonl", "--manifest", "data/hidden/manifest.jsonl",
            "--max-epochs", "1",
        ],
    ));
    let out = qekit(
        dir.path(),
        &[
            "predict", "--seed", "1", "--out", "run", "--dataset", "wide/test.jsonl",
            "--manifest", "wide/hidden/manifest.jsonl", "--checkpoint", "run/checkpoint.qek",
        ],
    );
    assert_exit(&out, 2, "hidden size");
}

#[test]
fn predict_on_empty_dataset_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    assert_ok(&qekit(
        dir.path(),
        &[
            "train", "--seed", "1", "--out", "run", "--train-data", "data/train.jsonl",
            "--dev-data", "data/dev.jsonl", "--manifest", "data/hidden/manifest.jsonl",
            "--max-epochs", "1",
        ],
    ));
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = qekit(
        dir.path(),
        &[
            "predict", "--seed", "1", "--out", "run", "--dataset", "empty.jsonl",
            "--manifest", "data/hidden/manifest.jsonl", "--checkpoint", "run/checkpoint.qek",
        ],
    );
    assert_ok(&out);
    assert_eq!(fs::read(dir.path().join("run/predictions.jsonl")).unwrap(), b"");
}

#[test]
fn unknown_config_field_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"seed": 1, "learnig_rate": 0.1}"#).unwrap();
    let out = qekit(dir.path(), &["synth", "--config", "cfg.json"]);
    assert_exit(&out, 2, "learnig_rate");
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"seed": 5, "out": "from-config", "n_train": 8, "n_dev": 4, "n_test": 0,
            "d": 8, "l": 2, "vocab_size": 40, "max_len": 5}"#,
    )
    .unwrap();
    assert_ok(&qekit(dir.path(), &["synth", "--config", "cfg.json"]));
    assert!(dir.path().join("from-config/train.jsonl").exists());

    assert_ok(&qekit(
        dir.path(),
        &["synth", "--config", "cfg.json", "--out", "from-flag", "--n-train", "2"],
    ));
    let flag_train = fs::read_to_string(dir.path().join("from-flag/train.jsonl")).unwrap();
    assert_eq!(flag_train.lines().count(), 2, "--n-train flag beats the config");
    let cfg_train = fs::read_to_string(dir.path().join("from-config/train.jsonl")).unwrap();
    assert_eq!(cfg_train.lines().count(), 8);
}

#[test]
fn score_sent_on_identical_predictions_reports_spearman_one() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    // Predictions that copy the gold scores exactly.
    let gold = fs::read_to_string(dir.path().join("data/test.jsonl")).unwrap();
    let preds: String = gold
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            format!(
                "{}\n",
                serde_json::json!({ "id": v["id"], "score": v["score"] })
            )
        })
        .collect();
    fs::write(dir.path().join("perfect.jsonl"), preds).unwrap();
    assert_ok(&qekit(
        dir.path(),
        &[
            "score", "--seed", "1", "--out", "rep", "--task", "sent", "--pred",
            "perfect.jsonl", "--gold", "data/test.jsonl",
        ],
    ));
    let report: BTreeMap<String, BTreeMap<String, f64>> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rep/report.json")).unwrap())
            .unwrap();
    for (lp, row) in &report {
        assert!(
            (row["spearman"] - 1.0).abs() < 1e-12,
            "{lp} spearman {}",
            row["spearman"]
        );
    }
    assert!(report.contains_key("avg"));
}

#[test]
fn spanify_all_ok_tags_gives_empty_span_lists() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    let gold = fs::read_to_string(dir.path().join("data/test.jsonl")).unwrap();
    let preds: String = gold
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let n = v["mt"].as_str().unwrap().split_whitespace().count();
            format!("{}\n", serde_json::json!({ "id": v["id"], "tags": vec!["OK"; n] }))
        })
        .collect();
    fs::write(dir.path().join("allok.jsonl"), preds).unwrap();
    assert_ok(&qekit(
        dir.path(),
        &[
            "spanify", "--seed", "1", "--out", "sp", "--dataset", "data/test.jsonl",
            "--pred", "allok.jsonl",
        ],
    ));
    for line in fs::read_to_string(dir.path().join("sp/spans.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["spans"].as_array().unwrap().len(), 0, "{line}");
    }
}

#[test]
fn channel_weights_anchor_rows_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&qekit(
        dir.path(),
        &["channel-weights", "--seed", "1", "--out", ".", "--scores", "0.4,1.0,0.75"],
    ));
    let rows: Vec<serde_json::Value> = serde_json::from_str(
        &fs::read_to_string(dir.path().join("channel_weights.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rows[0]["qe_only"], serde_json::json!(true));
    assert_eq!(rows[1]["src_weight"], serde_json::json!(0.0));
    assert_eq!(rows[1]["ref_weight"], serde_json::json!(0.4));
    assert_eq!(rows[1]["uni_weight"], serde_json::json!(0.6));
    assert_eq!(rows[2]["src_weight"], serde_json::json!(0.5));
    assert_eq!(rows[2]["ref_weight"], serde_json::json!(0.2));
    assert_eq!(rows[2]["uni_weight"], serde_json::json!(0.3));
}

#[test]
fn spanify_channel_mode_blends_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| fs::write(dir.path().join(name), body).unwrap();
    write("cdata.jsonl", "{\"id\":\"c1\",\"lp\":\"en-de\",\"src\":\"quelle text\",\"mt\":\"drei kleine worte\"}\n");
    write(
        "csrc.jsonl",
        "{\"id\":\"c1\",\"score\":0.2,\"dists\":[[0.8,0.1,0.1],[0.2,0.6,0.2],[0.1,0.2,0.7]]}\n",
    );
    write(
        "cref.jsonl",
        "{\"id\":\"c1\",\"score\":0.75,\"dists\":[[0.6,0.3,0.1],[0.3,0.4,0.3],[0.2,0.2,0.6]]}\n",
    );
    write(
        "cuni.jsonl",
        "{\"id\":\"c1\",\"score\":0.5,\"dists\":[[0.7,0.2,0.1],[0.5,0.3,0.2],[0.1,0.1,0.8]]}\n",
    );
    assert_ok(&qekit(
        dir.path(),
        &[
            "spanify", "--seed", "1", "--out", "ch", "--dataset", "cdata.jsonl",
            "--src-pred", "csrc.jsonl", "--ref-pred", "cref.jsonl", "--uni-pred",
            "cuni.jsonl",
        ],
    ));
    // ref score 0.75 → (0.5, 0.2, 0.3); tokens 2 and 3 blend non-OK, so one
    // span covers "kleine worte" and the major token dominates.
    let line = fs::read_to_string(dir.path().join("ch/spans.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(
        v["spans"],
        serde_json::json!([{ "start": 5, "end": 17, "severity": "major" }])
    );

    // A low reference score switches to the source channel alone.
    write(
        "cref-low.jsonl",
        "{\"id\":\"c1\",\"score\":0.2,\"dists\":[[0.6,0.3,0.1],[0.3,0.4,0.3],[0.2,0.2,0.6]]}\n",
    );
    assert_ok(&qekit(
        dir.path(),
        &[
            "spanify", "--seed", "1", "--out", "ch-low", "--dataset", "cdata.jsonl",
            "--src-pred", "csrc.jsonl", "--ref-pred", "cref-low.jsonl", "--uni-pred",
            "cuni.jsonl",
        ],
    ));
    let line = fs::read_to_string(dir.path().join("ch-low/spans.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(
        v["spans"],
        serde_json::json!([{ "start": 5, "end": 17, "severity": "major" }]),
        "source channel: minor at token 2, major at token 3"
    );
}

#[test]
fn three_class_checkpoints_emit_distributions() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    assert_ok(&qekit(
        dir.path(),
        &[
            "train", "--seed", "1", "--out", "run3", "--train-data", "data/train.jsonl",
            "--dev-data", "data/dev.jsonl", "--manifest", "data/hidden/manifest.jsonl",
            "--max-epochs", "1", "--n-classes", "3",
        ],
    ));
    assert_ok(&qekit(
        dir.path(),
        &[
            "predict", "--seed", "1", "--out", "run3", "--dataset", "data/test.jsonl",
            "--manifest", "data/hidden/manifest.jsonl", "--checkpoint",
            "run3/checkpoint.qek",
        ],
    ));
    let first = fs::read_to_string(dir.path().join("run3/predictions.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(v.get("tags").is_none(), "3-class output carries dists, not tags");
    let dists = v["dists"].as_array().unwrap();
    assert_eq!(dists[0].as_array().unwrap().len(), 3);
    let sum: f64 = dists[0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}
