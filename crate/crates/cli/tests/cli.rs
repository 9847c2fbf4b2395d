mod common;

use std::path::Path;
use std::process::{Command, Output};

use jointpred_core::evaluator::MetricsReport;
use jointpred_core::service::{PlanResponse, PredictResponse};

fn jointpred(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointpred")).args(args).current_dir(dir).env_remove("JOINTPRED_CHECKPOINT").env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = jointpred(&["predict", "--bogus"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_input_gives_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = jointpred(&["predict", "--model", "missing.ckpt", "--scene", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("missing.ckpt"));
}

#[test]
fn gen_data_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    ok(jointpred(&["gen-data", "--template", "car_following", "--count", "2", "--seed", "4", "--out", "scenes.json"], dir.path()));
    let scenes = jointpred_core::data::load_scenes(&dir.path().join("scenes.json")).unwrap();
    assert_eq!(scenes.len(), 2);
    std::fs::write(dir.path().join("scene.json"), scenes[0].to_json()).unwrap();
    common::write_model(dir.path(), 2);

    let args = ["predict", "--model", "model-2.ckpt", "--scene", "scene.json", "--k", "3", "--condition", "2=brake a=-4"];
    let first = ok(jointpred(&args, dir.path()));
    let second = ok(jointpred(&args, dir.path()));
    assert_eq!(first, second, "byte-identical across processes");
    let resp: PredictResponse = serde_json::from_str(&first).unwrap();
    for c in &resp.cliques {
        assert!(c.prediction.modes.len() <= 3);
        let total: f64 = c.prediction.modes.iter().map(|m| m.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    let env = Command::new(env!("CARGO_BIN_EXE_jointpred"))
        .args(["predict", "--scene", "scene.json", "--k", "3", "--condition", "2=brake a=-4"])
        .current_dir(dir.path())
        .env("JOINTPRED_CHECKPOINT", "model-2.ckpt")
        .output()
        .unwrap();
    assert_eq!(ok(env), first, "checkpoint taken from the environment");
}

#[test]
fn plan_request_writes_json_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    common::write_model(dir.path(), 2);
    let scene = common::following_scene();
    let ego = scene.track(1).unwrap().state(scene.frames() - 1).unwrap();
    let req = serde_json::json!({
        "scene": scene, "ego": 1, "k": 2,
        "reference": { "x": 0.0, "y": 0.0, "heading": 0.0, "speed": ego[2] },
        "solver": { "max_outer": 8, "max_inner": 100, "starts": [[0.0, 0.0]] }
    });
    std::fs::write(dir.path().join("plan.json"), req.to_string()).unwrap();
    let out = ok(jointpred(&["plan", "--model", "model-2.ckpt", "--request", "plan.json", "--svg", "plan.svg"], dir.path()));
    let resp: PlanResponse = serde_json::from_str(&out).unwrap();
    assert!(resp.plan.branches.iter().all(|b| b.controls[0] == resp.plan.shared_first));
    assert!(std::fs::read_to_string(dir.path().join("plan.svg")).unwrap().starts_with("<svg"));
}

/// Toy training run: a few epochs on car-following scenes must beat the
/// untrained model on its own training set.
#[test]
fn train_then_evaluate_improves_ade() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(jointpred(&["gen-data", "--template", "car_following", "--count", "12", "--seed", "1", "--out", "train.json"], d));
    let config = "[model]\nkinds = [\"vehicle\"]\nhidden = 8\npre_dim = 4\nedge_hidden = 8\nfactor_hidden = 8\nref_hidden = 8\naction_hidden = 8\nseed = 3\n\n[training]\nepochs = 6\nbatch_size = 8\nlearning_rate = 0.01\n";
    std::fs::write(d.join("train.toml"), config).unwrap();
    ok(jointpred(&["train", "--data", "train.json", "--config", "train.toml", "--out", "trained.ckpt", "--epochs", "6", "--loss-csv", "loss.csv"], d));
    let csv = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let untrained = jointpred_core::Model::new(jointpred_cli::read_config::<jointpred_cli::TrainFile>(&d.join("train.toml")).unwrap().model).unwrap();
    untrained.save(&d.join("untrained.ckpt")).unwrap();
    let ade = |ckpt: &str, out: &str| -> f64 {
        let text = ok(jointpred(&["evaluate", "--model", ckpt, "--data", "train.json", "--out-dir", out, "--plots", "--n-max", "3"], d));
        let report: MetricsReport = serde_json::from_str(&text).unwrap();
        report.horizons.last().unwrap().ade
    };
    let trained = ade("trained.ckpt", "eval-trained");
    let base = ade("untrained.ckpt", "eval-untrained");
    assert!(trained < base, "trained ADE {trained} vs untrained {base}");
    for f in ["metrics.json", "horizons.csv", "best_of_n.csv", "best_of_n.svg", "collision_rate.svg"] {
        assert!(d.join("eval-trained").join(f).exists(), "{f}");
    }
}

#[test]
fn raw_track_files_load_as_one_pedestrian_scene() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hotel.txt");
    let rows: String = (0..20).flat_map(|k| [format!("{} 1 {} 0.0\n", 10 * k, 0.4 * k as f64), format!("{} 2 0.0 {}\n", 10 * k, 0.5 * k as f64)]).collect();
    std::fs::write(&path, rows).unwrap();
    let scenes = jointpred_cli::load_data(&path).unwrap();
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0].agents.len(), 2);
    assert!(scenes[0].agents.iter().all(|t| t.kind == jointpred_core::AgentKind::Pedestrian));
    assert!((scenes[0].dt - 0.4).abs() < 1e-12);
}
