use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn lrq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrq")).args(args).output().expect("lrq runs")
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

fn tiny_config(dir: &Path, variant: &str, seeds: &str) -> PathBuf {
    let path = dir.join(format!("{variant}.json"));
    let text = format!(
        r#"{{
  "env": {{ "name": "lqr" }},
  "agent": {{ "variant": "{variant}", "batch_size": 8, "hidden_sizes": [8], "ensemble_size": 3,
             "replay_capacity": 1000, "track_uncertainty": true }},
  "total_steps": 300, "eval_interval": 100, "eval_episodes": 2, "learning_starts": 50,
  "rank_scan": {{ "num_matrices": 4, "matrix_size": 8, "delta": 0.01 }},
  "seeds": {seeds}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn complete_restores_rank_one_entry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("done.csv");
    let res = lrq(&[
        "complete",
        "--matrix",
        data("rank_one.csv").to_str().unwrap(),
        "--removals",
        data("rank_one_removals.csv").to_str().unwrap(),
        "--zeta",
        "50",
        "--epsilon",
        "1e-4",
        "--max-iter",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let original = read_csv(&data("rank_one.csv"));
    let done = read_csv(&out);
    // Rank one: entry (2, 3) = m[2][0] * m[0][3] / m[0][0] = 3.
    assert!((done[2][3] - 3.0).abs() / 3.0 < 0.05, "got {}", done[2][3]);
    for (i, row) in original.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if (i, j) != (2, 3) {
                assert_eq!(done[i][j], *v);
            }
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert!(report["iterations"].as_u64().unwrap() >= 1);
    assert!(report["converged"].is_boolean());
    assert!(report["final_relative_change"].is_number());
}

#[test]
fn complete_with_no_removals_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("done.csv");
    let res = lrq(&[
        "complete",
        "--matrix",
        data("rank_one.csv").to_str().unwrap(),
        "--removals",
        data("empty_removals.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert_eq!(read_csv(&out), read_csv(&data("rank_one.csv")));
}

#[test]
fn complete_rejects_a_fully_removed_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("done.csv");
    let res = lrq(&[
        "complete",
        "--matrix",
        data("rank_one.csv").to_str().unwrap(),
        "--removals",
        data("full_row_removals.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("infeasible"));
    assert!(!out.exists());
}

#[test]
fn train_scan_correlate_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut runs = Vec::new();
    for variant in ["DDPG", "UALQE-T-BB"] {
        let cfg = tiny_config(root, variant, "[1, 2]");
        let out = root.join(variant);
        let res = lrq(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        for seed in [1, 2] {
            let metrics = std::fs::read_to_string(out.join(format!("seed_{seed}/metrics.csv"))).unwrap();
            assert_eq!(metrics.lines().count(), 5);
        }
        runs.push(out);
    }

    let ck = runs[0].join("seed_1/checkpoints/step_300");
    let res = lrq(&["rank-scan", "--checkpoint", ck.to_str().unwrap(), "--n", "5", "--size", "8", "--delta", "0.01"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let scan: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let mean = scan["mean"].as_f64().unwrap();
    assert!((1.0..=8.0).contains(&mean));

    let corr_csv = root.join("corr.csv");
    let res = lrq(&[
        "correlate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--quantifier",
        "bb",
        "--n",
        "6",
        "--size",
        "8",
        "--out",
        corr_csv.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&corr_csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "u_mean,u_std,arank");
    assert_eq!(text.lines().count(), 7);
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(summary["undefined"].is_boolean());

    let scan_dir = root.join("uscan");
    let res = lrq(&[
        "uncertainty-scan",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--quantifier",
        "cb",
        "--size",
        "8",
        "--out",
        scan_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_csv(&scan_dir.join("q_matrix.csv")).len(), 8);
    assert_eq!(read_csv(&scan_dir.join("uncertainty.csv"))[0].len(), 8);

    let report_dir = root.join("report");
    let res = lrq(&[
        "report",
        "--runs",
        runs[0].to_str().unwrap(),
        runs[1].to_str().unwrap(),
        "--svg",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let md = String::from_utf8_lossy(&res.stdout);
    assert!(md.starts_with("| Environment | DDPG | UALQE-T-BB | Optimal |"));
    assert!(md.contains("| lqr |"));
    assert!(report_dir.join("report.csv").exists());
    assert!(report_dir.join("return_lqr.svg").exists());
    assert!(report_dir.join("arank_lqr.svg").exists());
}

#[test]
fn train_is_repeatable_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "SVRL-E", "[4, 5]");
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let res = lrq(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        assert!(!out.join("seed_4").exists());
        texts.push(std::fs::read(out.join("seed_9/metrics.csv")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn train_rejects_bad_config_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"total_steps": 1000, "eval_interval": 300}"#).unwrap();
    let out = dir.path().join("run");
    let res = lrq(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(!out.exists());
}
