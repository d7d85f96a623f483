//! End-to-end subcommand behavior through the `scr` binary.

use std::path::Path;
use std::process::{Command, Output};

fn scr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn build_graph_happy_path_prints_stats() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "commands.txt", "kai\nda kai\n");
    write(tmp.path(), "lexicon.txt", "kai\tk ai\nda\td a\n");
    let out = scr(
        tmp.path(),
        &[
            "build-graph",
            "--commands",
            "commands.txt",
            "--lexicon",
            "lexicon.txt",
            "--states-per-phone",
            "2",
            "--out",
            "graph.txt",
        ],
    );
    assert_ok(&out);
    let stats: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stats JSON on stdout");
    assert_eq!(stats["finals"], 2);
    let dump = std::fs::read_to_string(tmp.path().join("graph.txt")).unwrap();
    assert!(dump.starts_with("0 START"));
}

#[test]
fn build_graph_oov_names_word() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "commands.txt", "kai zz\n");
    write(tmp.path(), "lexicon.txt", "kai\tk ai\n");
    let out = scr(
        tmp.path(),
        &[
            "build-graph",
            "--commands",
            "commands.txt",
            "--lexicon",
            "lexicon.txt",
            "--out",
            "graph.txt",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("zz"), "stderr: {stderr}");
}

#[test]
fn build_graph_prefix_collision_fails() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "commands.txt", "kai\nkai men\n");
    write(tmp.path(), "lexicon.txt", "kai\tk ai\nmen\tm en\n");
    let out = scr(
        tmp.path(),
        &[
            "build-graph",
            "--commands",
            "commands.txt",
            "--lexicon",
            "lexicon.txt",
            "--out",
            "graph.txt",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("prefix"), "stderr: {stderr}");
}

#[test]
fn synth_data_config_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "override.json",
        r#"{"positives_per_command": 2, "negatives": 3}"#,
    );
    let out = scr(
        tmp.path(),
        &[
            "synth-data",
            "--preset",
            "toy",
            "--states-per-phone",
            "1",
            "--positives-per-command",
            "99",
            "--out",
            "data",
            "--config",
            "override.json",
        ],
    );
    assert_ok(&out);
    let manifest = std::fs::read_to_string(tmp.path().join("data/manifest.jsonl")).unwrap();
    // Header line plus 8 commands x 2 positives + 3 negatives.
    assert_eq!(manifest.lines().count(), 1 + 8 * 2 + 3);
}

#[test]
fn synth_data_unknown_config_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.json", r#"{"positives": 2}"#);
    let out = scr(
        tmp.path(),
        &[
            "synth-data",
            "--preset",
            "toy",
            "--out",
            "data",
            "--config",
            "bad.json",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn confusion_sets_dump_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "commands.txt", "kai\ngai\nda men\n");
    write(
        tmp.path(),
        "lexicon.txt",
        "kai\tk ai\ngai\tg ai\nda\td a\nmen\tm en\n",
    );
    let args = [
        "confusion-sets",
        "--commands",
        "commands.txt",
        "--lexicon",
        "lexicon.txt",
        "--states-per-phone",
        "1",
        "--n",
        "2",
    ];
    let a = scr(tmp.path(), &args);
    let b = scr(tmp.path(), &args);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.starts_with("0: 1(1),2(4)"), "dump: {text}");
}

#[test]
fn roc_rejects_bad_sweep_range() {
    let tmp = tempfile::tempdir().unwrap();
    // Range check fires before any file is touched.
    let out = scr(
        tmp.path(),
        &[
            "roc",
            "--manifest",
            "m.jsonl",
            "--checkpoint",
            "c.ckpt",
            "--commands",
            "c.txt",
            "--lexicon",
            "l.txt",
            "--theta-min",
            "-0.5",
            "--theta-max",
            "-1.0",
            "--out",
            "roc",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad sweep"));
}

/// Tiny but complete pipeline: synth -> CE -> MSCE -> evaluate -> roc ->
/// compare, exercising every artifact on disk.
#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_ok(&scr(
        p,
        &[
            "synth-data", "--preset", "toy", "--states-per-phone", "1", "--out", "train_data",
            "--positives-per-command", "10", "--negatives", "20", "--feature-dim", "8",
            "--dial-distance", "2.0", "--dur-min", "2", "--dur-max", "4",
            "--profile-seed", "7", "--seed", "1",
        ],
    ));
    assert_ok(&scr(
        p,
        &[
            "synth-data", "--preset", "toy", "--states-per-phone", "1", "--out", "eval_data",
            "--positives-per-command", "5", "--negatives", "20", "--feature-dim", "8",
            "--dial-distance", "2.0", "--dur-min", "2", "--dur-max", "4",
            "--near-miss-fraction", "0.5", "--profile-seed", "7", "--seed", "2",
        ],
    ));
    assert_ok(&scr(
        p,
        &[
            "train", "--manifest", "train_data/manifest.jsonl",
            "--commands", "train_data/commands.txt", "--lexicon", "train_data/lexicon.txt",
            "--states-per-phone", "1", "--stage", "ce", "--epochs", "3",
            "--num-blocks", "2", "--channels", "12", "--dilations", "1,2",
            "--causal-blocks", "", "--dropout-rate", "0.05", "--batch-size", "8",
            "--seed", "1", "--average-last-k", "2", "--out", "run_ce",
        ],
    ));
    assert!(p.join("run_ce/final.ckpt").is_file());
    assert!(p.join("run_ce/train_log.jsonl").is_file());
    assert!(p.join("run_ce/ckpt_epoch003.ckpt").is_file());

    assert_ok(&scr(
        p,
        &[
            "train", "--manifest", "train_data/manifest.jsonl",
            "--commands", "train_data/commands.txt", "--lexicon", "train_data/lexicon.txt",
            "--states-per-phone", "1", "--stage", "msce", "--epochs", "2",
            "--strategy", "hs", "--n-confusers", "3", "--xi", "32",
            "--batch-size", "8", "--seed", "1", "--average-last-k", "2",
            "--init-checkpoint", "run_ce/final.ckpt", "--out", "run_msce",
        ],
    ));

    for (ckpt, out_dir) in [("run_ce", "eval_ce"), ("run_msce", "eval_msce")] {
        assert_ok(&scr(
            p,
            &[
                "evaluate", "--manifest", "eval_data/manifest.jsonl",
                "--checkpoint", &format!("{ckpt}/final.ckpt"),
                "--commands", "train_data/commands.txt", "--lexicon", "train_data/lexicon.txt",
                "--states-per-phone", "1", "--theta", "-1.5", "--out", out_dir,
            ],
        ));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join(out_dir).join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["positives"], 40);
        assert_eq!(report["negatives"], 20);
        assert!(p.join(out_dir).join("confusion.csv").is_file());
    }

    for (ckpt, out_dir) in [("run_ce", "roc_ce"), ("run_msce", "roc_msce")] {
        assert_ok(&scr(
            p,
            &[
                "roc", "--manifest", "eval_data/manifest.jsonl",
                "--checkpoint", &format!("{ckpt}/final.ckpt"),
                "--commands", "train_data/commands.txt", "--lexicon", "train_data/lexicon.txt",
                "--states-per-phone", "1", "--theta-min", "-3.0", "--theta-max", "-0.1",
                "--steps", "10", "--out", out_dir,
            ],
        ));
        let csv = std::fs::read_to_string(p.join(out_dir).join("roc.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
    }

    let cmp = scr(
        p,
        &[
            "compare", "--baseline", "roc_ce/roc.json", "--candidate", "roc_msce/roc.json",
            "--out", "gains.json",
        ],
    );
    assert_ok(&cmp);
    assert!(p.join("gains.json").is_file());

    // Comparing identical reports yields zero gains.
    let self_cmp = scr(
        p,
        &["compare", "--baseline", "roc_ce/roc.json", "--candidate", "roc_ce/roc.json"],
    );
    assert_ok(&self_cmp);
    let table = String::from_utf8_lossy(&self_cmp.stdout);
    for line in table.lines().skip(1) {
        assert!(line.contains("0.00") || line.contains("n/a"), "line: {line}");
    }
}

#[test]
fn compare_rejects_mismatched_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let mk = |hash: &str| {
        format!(
            r#"{{"manifest_hash":"{hash}","command_count":2,"points":[{{"threshold":-1.0,"far":0.0,"frr":0.5,"confusions":1,"false_alarms":0,"rejects":1}}]}}"#
        )
    };
    write(p, "a.json", &mk("aaaa"));
    write(p, "b.json", &mk("bbbb"));
    let out = scr(p, &["compare", "--baseline", "a.json", "--candidate", "b.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different manifests"));
}

#[test]
fn evaluate_empty_manifest_yields_valid_empty_report() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    // A corpus with zero utterances still has a valid manifest header.
    assert_ok(&scr(
        p,
        &[
            "synth-data", "--preset", "toy", "--states-per-phone", "1", "--out", "data",
            "--positives-per-command", "1", "--negatives", "0", "--feature-dim", "8",
            "--profile-seed", "3", "--seed", "1",
        ],
    ));
    assert_ok(&scr(
        p,
        &[
            "train", "--manifest", "data/manifest.jsonl", "--commands", "data/commands.txt",
            "--lexicon", "data/lexicon.txt", "--states-per-phone", "1", "--stage", "ce",
            "--epochs", "1", "--num-blocks", "1", "--channels", "8", "--dilations", "1",
            "--causal-blocks", "", "--dropout-rate", "0.0", "--batch-size", "8",
            "--seed", "1", "--average-last-k", "1", "--out", "run",
        ],
    ));
    // Empty manifest: header only.
    let manifest = std::fs::read_to_string(p.join("data/manifest.jsonl")).unwrap();
    let header = manifest.lines().next().unwrap();
    write(p, "empty.jsonl", &format!("{header}\n"));
    assert_ok(&scr(
        p,
        &[
            "evaluate", "--manifest", "empty.jsonl", "--checkpoint", "run/final.ckpt",
            "--commands", "data/commands.txt", "--lexicon", "data/lexicon.txt",
            "--states-per-phone", "1", "--theta", "-1.0", "--out", "eval_empty",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("eval_empty/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["positives"], 0);
    assert!(report["frr"].is_null());
    assert!(report["far"].is_null());
}
