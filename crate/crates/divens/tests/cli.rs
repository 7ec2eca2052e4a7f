//! End-to-end checks of the command-line binary: exit codes, the one-line
//! JSON error records on stderr, the files each subcommand writes, and
//! byte-identical reruns for the subcommands the acceptance gate does not
//! already replay.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use once_cell::sync::Lazy;
use tempfile::TempDir;

/// A desk-scale run small enough that training is instantaneous.
const TINY_CONFIG: &str = r#"{
    "dataset": {"kind": "blobs", "classes": 3, "dim": 4, "train_per_class": 20, "test_per_class": 8},
    "ensemble_size": 2,
    "mlp": {"input_dim": 4, "hidden_layers": [6], "num_classes": 3},
    "train": {"epochs": 2, "seed": 7, "adp": {"alpha": 2.0, "beta": 0.5}},
    "attacks": [{"method": "pgd", "eps": 0.1, "steps": 3}]
}"#;

/// Workspace shared by every test: a config file and one trained
/// checkpoint, so each test exercises its subcommand without retraining.
struct Fixture {
    dir: TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("train");
    let result = divens(&["train"], &config, &out);
    assert!(
        result.status.success(),
        "fixture training failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    Fixture {
        checkpoint: out.join("checkpoint.json"),
        config,
        dir,
    }
});

/// Runs the binary with `--config`, `--out`, and `--quiet` appended.
fn divens(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divens"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

/// Parses the single-line JSON error record the binary prints on stderr.
fn error_record(output: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(output.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.trim_end().lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| line.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let output = Command::new(env!("CARGO_BIN_EXE_divens"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8(output.stdout).unwrap();
    for name in ["train", "attack", "eval", "transfer", "detect", "theory", "hist"] {
        assert!(stdout.contains(name), "--help does not mention {name}");
    }
}

#[test]
fn missing_config_file_exits_one_with_a_usage_record() {
    let fx = &*FIXTURE;
    let missing = fx.dir.path().join("no-such-config.json");
    let output = divens(&["train"], &missing, &fx.dir.path().join("o1"));
    assert_eq!(output.status.code(), Some(1));
    let record = error_record(&output);
    assert_eq!(record["code"], "usage");
    assert_eq!(record["context"], "train");
    assert!(
        record["message"].as_str().unwrap().contains("no-such-config.json"),
        "message does not name the missing file: {record}"
    );
}

#[test]
fn malformed_config_json_exits_one() {
    let fx = &*FIXTURE;
    let broken = fx.dir.path().join("broken.json");
    std::fs::write(&broken, "{\"ensemble_size\": ").unwrap();
    let output = divens(&["train"], &broken, &fx.dir.path().join("o2"));
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(error_record(&output)["code"], "usage");
}

#[test]
fn unknown_flag_exits_one_with_a_usage_record() {
    let fx = &*FIXTURE;
    let output = divens(&["train", "--bogus"], &fx.config, &fx.dir.path().join("o3"));
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(error_record(&output)["code"], "usage");
}

#[test]
fn checkpoint_from_a_future_version_exits_three() {
    let fx = &*FIXTURE;
    let stub = fx.dir.path().join("future.json");
    std::fs::write(&stub, "{\"format_version\": 999}").unwrap();
    let output = divens(
        &["attack", "--checkpoint", stub.to_str().unwrap()],
        &fx.config,
        &fx.dir.path().join("o4"),
    );
    assert_eq!(output.status.code(), Some(3));
    let record = error_record(&output);
    assert_eq!(record["code"], "format-version");
    assert_eq!(record["context"], "attack");
}

#[test]
fn missing_idx_files_exit_two_as_io() {
    let fx = &*FIXTURE;
    let config = fx.dir.path().join("idx.json");
    std::fs::write(
        &config,
        r#"{
            "dataset": {
                "kind": "idx",
                "train_images": "/no/such/train-images",
                "train_labels": "/no/such/train-labels",
                "test_images": "/no/such/test-images",
                "test_labels": "/no/such/test-labels"
            },
            "mlp": {"input_dim": 784, "hidden_layers": [8], "num_classes": 10},
            "train": {"epochs": 1, "seed": 7, "adp": {"alpha": 2.0, "beta": 0.5}}
        }"#,
    )
    .unwrap();
    let output = divens(&["train"], &config, &fx.dir.path().join("o5"));
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(error_record(&output)["code"], "io");
}

#[test]
fn starved_theory_run_exits_four_and_still_writes_the_report() {
    let fx = &*FIXTURE;
    let out = fx.dir.path().join("o6");
    // One projected step cannot reach any of the optima.
    let output = divens(&["theory", "--steps", "1"], &fx.config, &out);
    assert_eq!(output.status.code(), Some(4));
    assert_eq!(error_record(&output)["code"], "theory-failure");
    let report = std::fs::read_to_string(out.join("theory_report.json")).unwrap();
    let checks: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(!checks.as_array().unwrap().is_empty());
}

#[test]
fn zero_epsilon_attack_reports_robust_equal_to_clean() {
    let fx = &*FIXTURE;
    let out = fx.dir.path().join("o7");
    let output = divens(
        &[
            "attack",
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--eps",
            "0",
        ],
        &fx.config,
        &out,
    );
    assert!(output.status.success());
    let summary = read_csv(&out.join("attack_summary.csv"));
    let value = |metric: &str| -> String {
        summary
            .iter()
            .find(|row| row[0] == metric)
            .unwrap_or_else(|| panic!("no {metric} row"))[1]
            .clone()
    };
    assert_eq!(value("clean_accuracy"), value("robust_accuracy"));
    // Success counts misclassified adversarial examples, so a zero-budget
    // attack succeeds exactly on the examples the model already misses.
    let success = value("attack_success_rate").parse::<f64>().unwrap();
    let clean = value("clean_accuracy").parse::<f64>().unwrap();
    assert!((success - (1.0 - clean)).abs() < 1e-12);
}

#[test]
fn attack_rejects_out_of_range_victim_member() {
    let fx = &*FIXTURE;
    let output = divens(
        &[
            "attack",
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--victim-member",
            "9",
        ],
        &fx.config,
        &fx.dir.path().join("o8"),
    );
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(error_record(&output)["code"], "usage");
}

#[test]
fn transfer_detect_and_hist_write_their_tables() {
    let fx = &*FIXTURE;
    let out = fx.dir.path().join("o9");
    let checkpoint = fx.checkpoint.to_str().unwrap();

    let transfer = divens(
        &["transfer", "--checkpoint", checkpoint, "--count", "12"],
        &fx.config,
        &out,
    );
    assert!(transfer.status.success());
    for name in ["transfer_untargeted.csv", "transfer_targeted.csv"] {
        let grid = read_csv(&out.join(name));
        assert_eq!(grid[0][0], "substitute", "{name} header");
        // Header row plus one row per member, each with k rate columns.
        assert_eq!(grid.len(), 3, "{name} rows");
        assert_eq!(grid[1].len(), 3, "{name} columns");
    }

    let detect = divens(
        &["detect", "--checkpoint", checkpoint, "--count", "10"],
        &fx.config,
        &out,
    );
    assert!(detect.status.success());
    let scores = read_csv(&out.join("detection_scores.csv"));
    assert_eq!(scores[0], vec!["kind", "score"]);
    assert_eq!(scores.len(), 21, "10 clean + 10 adversarial + header");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("detect_summary.json")).unwrap())
            .unwrap();
    let auc = summary["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc), "auc {auc}");

    let hist = divens(
        &["hist", "--checkpoint", checkpoint, "--bins", "5"],
        &fx.config,
        &out,
    );
    assert!(hist.status.success());
    let bins = read_csv(&out.join("hist.csv"));
    assert_eq!(bins[0], vec!["bin_lo", "bin_hi", "count"]);
    assert_eq!(bins.len(), 6, "5 bins + header");
    let counted: usize = bins[1..].iter().map(|row| row[2].parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 24, "every test example lands in some bin");
}

#[test]
fn transfer_detect_and_hist_reruns_are_byte_identical() {
    let fx = &*FIXTURE;
    let checkpoint = fx.checkpoint.to_str().unwrap();
    let run = |label: &str| -> PathBuf {
        let out = fx.dir.path().join(label);
        for args in [
            vec!["transfer", "--checkpoint", checkpoint, "--count", "8"],
            vec!["detect", "--checkpoint", checkpoint, "--count", "6"],
            vec!["hist", "--checkpoint", checkpoint, "--bins", "4"],
        ] {
            let output = divens(&args, &fx.config, &out);
            assert!(output.status.success(), "{args:?} failed");
        }
        out
    };
    let a = run("rerun-a");
    let b = run("rerun-b");
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name} differs between reruns"
        );
    }
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let fx = &*FIXTURE;
    let out_seeded = fx.dir.path().join("seed-9");
    let output = Command::new(env!("CARGO_BIN_EXE_divens"))
        .args(["train", "--seed", "9"])
        .arg("--config")
        .arg(&fx.config)
        .arg("--out")
        .arg(&out_seeded)
        .arg("--quiet")
        .output()
        .unwrap();
    assert!(output.status.success());
    let seeded = std::fs::read(out_seeded.join("checkpoint.json")).unwrap();
    let config_seed = std::fs::read(&fx.checkpoint).unwrap();
    assert_ne!(seeded, config_seed, "--seed 9 reproduced the seed-7 checkpoint");

    let reloaded: serde_json::Value =
        serde_json::from_str(&String::from_utf8(seeded).unwrap()).unwrap();
    assert_eq!(reloaded["seed"], 9);
}

#[test]
fn quiet_flag_suppresses_stdout() {
    let fx = &*FIXTURE;
    let output = divens(
        &["eval", "--checkpoint", fx.checkpoint.to_str().unwrap()],
        &fx.config,
        &fx.dir.path().join("o10"),
    );
    assert!(output.status.success());
    assert!(output.stdout.is_empty(), "quiet run still printed to stdout");
}
