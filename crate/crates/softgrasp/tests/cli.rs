//! End-to-end runs of the command-line binary at miniature scale: one
//! dataset flows through every subcommand, and failures must produce the
//! machine-readable error envelope.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softgrasp"))
        .args(args)
        .output()
        .expect("spawn CLI")
}

/// Runs a subcommand with a config written to disk and parses its stdout.
fn run_job(dir: &Path, name: &str, subcommand: &str, job: Value) -> Value {
    let config = dir.join(format!("{name}.json"));
    fs::write(&config, job.to_string()).expect("write job config");
    let out = cli(&[subcommand, "--config", config.to_str().expect("utf8")]);
    assert!(
        out.status.success(),
        "{subcommand} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tiny_object() -> Value {
    serde_json::json!({ "shape": "cuboid", "dims": [0.04, 0.03, 0.03], "res": 2 })
}

fn tiny_gripper() -> Value {
    serde_json::json!({ "pad_size": [0.02, 0.02], "w_open": 0.08, "pad_res": 3 })
}

fn tiny_model() -> Value {
    serde_json::json!({ "latent_size": 8, "message_passing_steps": 2, "mlp_hidden_width": 8 })
}

#[test]
fn every_subcommand_round_trips_one_tiny_scene() {
    let root = TempDir::new().expect("workdir");
    let path = |name: &str| -> PathBuf { root.path().join(name) };
    let s = |p: PathBuf| p.to_str().expect("utf8").to_string();

    let meta = run_job(
        root.path(),
        "gen",
        "gen-data",
        serde_json::json!({
            "out_dir": path("data"),
            "object": tiny_object(),
            "gripper": tiny_gripper(),
            "elastic_modulus_pa": 2e5,
            "poisson_ratio": 0.3,
            "n_surface_points": 3,
            "n_rotations": 1,
            "substeps": 2,
            "peak_force_n": 15.0,
            "contact_eps_m": 0.005,
            "train_fraction": 0.67,
            "seed": 4
        }),
    );
    assert_eq!(meta["n_grasps"].as_u64(), Some(3));

    let trained = run_job(
        root.path(),
        "train",
        "train",
        serde_json::json!({
            "data_dir": path("data"),
            "out_dir": path("model"),
            "model": tiny_model(),
            "variant": "full",
            "epochs": 3,
            "lr_initial": 1e-3,
            "lr_final": 1e-4,
            "seed": 0
        }),
    );
    let checkpoint = s(path("model").join("checkpoint.json"));
    assert!(path("model").join("history.csv").exists());
    assert!(trained["final_epoch_loss"].as_f64().expect("loss") > 0.0);

    let eval = run_job(
        root.path(),
        "eval",
        "eval",
        serde_json::json!({
            "data_dir": path("data"),
            "checkpoint": checkpoint,
            "variant": "full",
            "split": "all",
            "out_csv": path("eval.csv")
        }),
    );
    assert_eq!(eval["summary"]["n_grasps"].as_u64(), Some(3));
    let eval_csv = fs::read_to_string(path("eval.csv")).expect("eval csv");
    assert!(eval_csv.starts_with("grasp_index,"));

    let ranked = run_job(
        root.path(),
        "rank",
        "rank",
        serde_json::json!({
            "object": tiny_object(),
            "elastic_modulus_pa": 2e5,
            "gripper": tiny_gripper(),
            "n_surface_points": 3,
            "n_rotations": 2,
            "peak_force_n": 15.0,
            "seed": 11,
            "checkpoint": checkpoint,
            "variant": "full",
            "objective": "mean_deformation",
            "out_csv": path("rank.csv")
        }),
    );
    let n_ranked = ranked.as_array().expect("rows").len();
    assert!(n_ranked >= 2, "expected several candidates, got {n_ranked}");
    let rank_csv = fs::read_to_string(path("rank.csv")).expect("rank csv");
    assert!(rank_csv.starts_with("rank,grasp_index,predicted_q,qw,qx,qy,qz,tx,ty,tz"));
    assert_eq!(rank_csv.lines().count(), 1 + n_ranked);

    let refined = run_job(
        root.path(),
        "refine",
        "refine",
        serde_json::json!({
            "object": tiny_object(),
            "elastic_modulus_pa": 2e5,
            "gripper": tiny_gripper(),
            "n_surface_points": 3,
            "n_rotations": 2,
            "peak_force_n": 15.0,
            "seed": 11,
            "checkpoint": checkpoint,
            "variant": "full",
            "objective": "mean_deformation",
            "n_low": 1,
            "n_high": 1,
            "refine": { "steps": 2, "max_backtracks": 3 },
            "boxplot_csv": path("boxplot.csv"),
            "poses_json": path("poses.json")
        }),
    );
    assert_eq!(refined["low"].as_array().expect("low band").len(), 1);
    let boxplot = fs::read_to_string(path("boxplot.csv")).expect("boxplot csv");
    assert!(boxplot.starts_with("group,grasp_index,oracle_q,predicted_q"));
    for group in ["all", "threshold_low", "refined_low", "threshold_high", "refined_high"] {
        assert!(boxplot.contains(&format!("\n{group},")), "missing group {group}");
    }
    let poses: Value =
        serde_json::from_str(&fs::read_to_string(path("poses.json")).expect("poses"))
            .expect("poses JSON");
    assert_eq!(poses["low"][0]["refined_pose"].as_array().expect("pose").len(), 7);

    let fem = run_job(
        root.path(),
        "fem",
        "fem-solve",
        serde_json::json!({
            "object": tiny_object(),
            "elastic_modulus_pa": 2e5,
            "gripper": tiny_gripper(),
            "grasps": path("data").join("grasps.json"),
            "substeps": 2,
            "out_csv": path("fem.csv")
        }),
    );
    assert_eq!(fem.as_array().expect("rows").len(), 3);
    let fem_csv = fs::read_to_string(path("fem.csv")).expect("fem csv");
    assert!(fem_csv.starts_with("grasp_index,substep,force_n,"));
    assert_eq!(fem_csv.lines().count(), 1 + 3 * 2);

    let report = run_job(
        root.path(),
        "report",
        "report",
        serde_json::json!({
            "out_dir": path("report"),
            "level": 1,
            "train_dirs": [path("data")],
            "test_dirs": [path("data")],
            "train": {
                "model": tiny_model(),
                "variant": "full",
                "epochs": 2,
                "lr_initial": 1e-3,
                "lr_final": 1e-4,
                "seed": 0
            }
        }),
    );
    assert_eq!(report["level"].as_u64(), Some(1));
    let summary = fs::read_to_string(path("report").join("summary.csv")).expect("summary");
    assert!(summary.contains("full_scale_reference,NA,NA,0.78,0.66"));
}

#[test]
fn failures_print_the_error_envelope_and_exit_nonzero() {
    let root = TempDir::new().expect("workdir");

    // Missing config file.
    let out = cli(&["train", "--config", "/nonexistent/job.json"]);
    assert!(!out.status.success());
    let envelope: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(envelope["kind"].as_str(), Some("config"));
    assert!(envelope["message"].as_str().expect("message").contains("job.json"));

    // Structurally valid config with an impossible value.
    let config = root.path().join("bad.json");
    fs::write(
        &config,
        serde_json::json!({
            "out_dir": root.path().join("data"),
            "object": tiny_object(),
            "gripper": tiny_gripper(),
            "elastic_modulus_pa": 2e5,
            "poisson_ratio": 0.3,
            "n_surface_points": 3,
            "n_rotations": 1,
            "substeps": 0,
            "peak_force_n": 15.0,
            "contact_eps_m": 0.005,
            "train_fraction": 0.67,
            "seed": 4
        })
        .to_string(),
    )
    .expect("write config");
    let out = cli(&["gen-data", "--config", config.to_str().expect("utf8")]);
    assert!(!out.status.success());
    let envelope: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(envelope["kind"].as_str(), Some("train"));
}
