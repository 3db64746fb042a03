//! Integration tests driving the built binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn geoweak(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoweak"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[hpo]\nbuget = 10\n").unwrap();
    let out = geoweak(&["filter", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("buget"), "stderr should name the key: {err}");
    assert_eq!(err.trim().lines().count(), 1, "one-line reason: {err}");
}

#[test]
fn out_of_range_constant_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[imagery]\ntiles_dir = \"t\"\nmpp = -1.0\n[autolabel]\nscenes_dir = \"s\"\n",
    )
    .unwrap();
    let out = geoweak(&["filter", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mpp"), "{}", stderr(&out));
}

#[test]
fn missing_config_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = geoweak(&["fetch-points"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"), "{}", stderr(&out));
}

#[test]
fn stage_out_of_order_exits_1_with_log_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let demo_dir = dir.path().join("run");
    // A valid config pointing at a generated corpus comes from the demo.
    let out = geoweak(
        &["e2e-demo", "--run-dir", demo_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let config = demo_dir.join("config.toml");
    let fresh = dir.path().join("fresh");
    let out = geoweak(
        &[
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--run-dir",
            fresh.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("run.log"), "points at the log: {err}");
    assert!(err.contains("train"), "names the missing stage: {err}");
}

#[test]
fn demo_zero_noise_reaches_perfect_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("demo");
    let out = geoweak(&["e2e-demo", "--run-dir", run_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("recall 1.000"),
        "final line reports perfect recall: {}",
        stdout(&out)
    );

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("demo_report.json")).unwrap())
            .unwrap();
    for metric in ["precision", "recall", "f1", "map50", "map50_95"] {
        assert_eq!(report[metric].as_f64(), Some(1.0), "{metric} must be exactly 1");
    }

    // The golden test split must be large enough for stable recall
    // statistics under a 0.3 drop rate.
    let manifest = run_dir.join("dataset").join("golden").join("manifest.jsonl");
    let mut test_boxes = 0usize;
    for line in std::fs::read_to_string(&manifest).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        if rec["split"] == "test" {
            test_boxes += rec["n_boxes"].as_u64().unwrap_or(0) as usize;
        }
    }
    assert!(test_boxes >= 25, "golden test split carries {test_boxes} boxes, need >= 25");

    // Second run with identical inputs skips every stage.
    let again = geoweak(&["e2e-demo", "--run-dir", run_dir.to_str().unwrap()], dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    let text = stdout(&again);
    let skips = text.lines().filter(|l| l.contains("up to date, skipping")).count();
    assert!(skips >= 9, "all stages skip on resume, saw {skips}:\n{text}");
    assert!(text.contains("recall 1.000"));
}

#[test]
fn demo_with_drop_rate_degrades_recall_but_not_precision() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("demo");
    let out = geoweak(
        &[
            "e2e-demo",
            "--run-dir",
            run_dir.to_str().unwrap(),
            "--drop-rate",
            "0.3",
            "--seed",
            "5",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("demo_report.json")).unwrap())
            .unwrap();
    let recall = report["recall"].as_f64().unwrap();
    assert!(recall < 1.0, "dropped boxes must show up as missed recall, got {recall}");
    assert_eq!(report["precision"].as_f64(), Some(1.0), "no spurious boxes configured");
}

#[test]
fn changed_seed_reruns_training_but_skips_upstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("demo");
    let first = geoweak(&["e2e-demo", "--run-dir", run_dir.to_str().unwrap()], dir.path());
    assert!(first.status.success(), "{}", stderr(&first));

    let second = geoweak(
        &["e2e-demo", "--run-dir", run_dir.to_str().unwrap(), "--seed", "99"],
        dir.path(),
    );
    assert!(second.status.success(), "{}", stderr(&second));
    let text = stdout(&second);
    for stage in ["fetch-points", "fetch-tiles", "filter", "autolabel", "build-dataset"] {
        assert!(
            text.contains(&format!("{stage}: up to date, skipping")),
            "{stage} unaffected by the training seed:\n{text}"
        );
    }
    assert!(
        !text.contains("train_r016_full: up to date, skipping"),
        "training must rerun under a new seed:\n{text}"
    );
}

#[test]
fn filter_writes_one_csv_row_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("demo");
    let out = geoweak(&["e2e-demo", "--run-dir", run_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = std::fs::read_to_string(run_dir.join("filter").join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "tile_id,vegetation,desert,sea,kept,reasons");
    // 14 plain school sites, 1 vegetation decoy, 4 engineered rejects.
    assert_eq!(rows.len() - 1, 19, "one row per school-candidate tile");
    let rejected: Vec<&&str> = rows.iter().filter(|r| r.contains("false")).collect();
    assert_eq!(rejected.len(), 1, "only the vegetation decoy fails: {rejected:?}");
    assert!(rejected[0].contains("vegetation"));
}
