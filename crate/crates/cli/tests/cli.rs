//! Behavior of the `gfca` binary: exit codes, overrides, determinism, and
//! artifact round-trips.

use std::path::Path;
use std::process::Command;

fn gfca() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gfca"))
}

fn write_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"task = "synthetic"

[data.synthetic]
class_count = 4
feature_dim = 8
mean_scale = 1.5
noise_std = 0.6
rotation_angles_deg = [20.0]
translation = [0.8, -0.4]
samples_per_class = 30
seed = 42

[protocol]
few_shot_classes = [3]
shots = 2

[train]
mode = "gfca"
seed = 1
batch_real = 16
batch_target = 16
batch_fake = 16
d_h = 16
pretrain_steps = 25
main_steps = 30
eval_synth_per_class = 5

[output]
dir = "{}"
"#,
        out_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);

    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let status = gfca()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--set", "seed=7"])
            .status()
            .unwrap();
        assert!(status.success());
        snapshots.push((
            std::fs::read(run.join("metrics.json")).unwrap(),
            std::fs::read(run.join("resolved_config.toml")).unwrap(),
            std::fs::read(run.join("final.ckpt")).unwrap(),
        ));
    }
    assert_eq!(snapshots[0].0, snapshots[1].0, "reports differ between identical invocations");
    assert_eq!(snapshots[0].1, snapshots[1].1);
    assert_eq!(snapshots[0].2, snapshots[1].2);
}

#[test]
fn source_only_override_is_recorded_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    let status = gfca()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "mode=source-only"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "source-only");
    assert_eq!(report["config"]["train"]["lambda"], 0.0);
    assert_eq!(report["config"]["train"]["gamma"], 0.0);
}

#[test]
fn missing_dataset_path_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        r#"task = "x"
[data.files]
source = "does-not-exist.csv"
target = "also-missing.csv"
[protocol]
few_shot_classes = [1]
shots = 1
[output]
dir = "/tmp/never-used"
"#,
    )
    .unwrap();
    let output = gfca().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("data.files"), "stderr: {stderr}");
}

#[test]
fn config_without_data_source_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, "task = \"x\"\n[protocol]\nfew_shot_classes = [1]\nshots = 1\n").unwrap();
    let output = gfca().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("data"), "stderr: {stderr}");
}

#[test]
fn env_overrides_apply_before_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    let status = gfca()
        .env("GFCA_SET", "mode=mmd-only;seed=5")
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "seed=9"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "mmd-only");
    // the explicit flag wins over the environment
    assert_eq!(report["seed"], 9);
}

#[test]
fn synth_writes_loadable_files_and_consistent_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let cfg = write_config(dir.path(), &dir.path().join("unused"));
    let status =
        gfca().args(["synth", "--config"]).arg(&cfg).arg("--out-dir").arg(&out).status().unwrap();
    assert!(status.success());

    use gfca_core::datasets::{load_features, FeatureFormat};
    let source_csv = load_features(&out.join("source.csv"), FeatureFormat::Csv).unwrap();
    let source_bin = load_features(&out.join("source.bin"), FeatureFormat::PackedBinary).unwrap();
    assert_eq!(source_csv.len(), 120);
    assert_eq!(source_csv.dim(), 8);
    assert_eq!(source_csv.class_count, 4);
    assert_eq!(source_csv.features, source_bin.features);
    let target_bin = load_features(&out.join("target.bin"), FeatureFormat::PackedBinary).unwrap();
    assert_eq!(target_bin.len(), 120);

    // sidecar: transform applied to source means reproduces target means
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ground_truth.json")).unwrap())
            .unwrap();
    let source_means = truth["source_means"].as_array().unwrap();
    let target_means = truth["target_means"].as_array().unwrap();
    let theta = 20.0f64.to_radians();
    for (sm, tm) in source_means.iter().zip(target_means) {
        let s: Vec<f64> = sm.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let t: Vec<f64> = tm.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let expect0 = theta.cos() * s[0] - theta.sin() * s[1] + 0.8;
        let expect1 = theta.sin() * s[0] + theta.cos() * s[1] - 0.4;
        assert!((t[0] - expect0).abs() < 1e-12);
        assert!((t[1] - expect1).abs() < 1e-12);
        for d in 2..8 {
            assert_eq!(t[d], s[d]);
        }
    }
}

#[test]
fn synth_with_different_seeds_differs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("unused"));
    for (sub, seed) in [("s1", "42"), ("s2", "43")] {
        let status = gfca()
            .args(["synth", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path().join(sub))
            .args(["--set", &format!("data.synthetic.seed={seed}")])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("s1/source.bin")).unwrap();
    let b = std::fs::read(dir.path().join("s2/source.bin")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn gradcheck_scope_and_fault_injection() {
    let output = gfca().args(["gradcheck", "--scope", "mkmmd", "--reps", "2"]).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("l_e:"));
    assert!(!stdout.contains("l_g:"), "scope must restrict the losses: {stdout}");

    let output = gfca()
        .args(["gradcheck", "--scope", "adapt", "--reps", "1", "--inject-fault"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn report_aggregates_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("unused"));
    for (seed, sub) in [("3", "r1"), ("4", "r2")] {
        let status = gfca()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--set", &format!("seed={seed}")])
            .args(["--set", &format!("output.dir={}", dir.path().join(sub).display())])
            .args(["--set", "main_steps=10", "--set", "pretrain_steps=5"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let output = gfca()
        .arg("report")
        .arg(dir.path().join("r1"))
        .arg(dir.path().join("r2"))
        .args(["--format", "csv"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("method,synthetic,avg_l,avg_n,avg"), "{stdout}");
    assert!(stdout.contains("gfca,"), "{stdout}");
    assert!(stdout.contains('±'), "two seeds must aggregate to mean±std: {stdout}");
}

#[test]
fn export_embeddings_from_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    let status = gfca()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "main_steps=10", "--set", "pretrain_steps=5"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = dir.path().join("emb.csv");
    let status =
        gfca().args(["export-embeddings", "--run"]).arg(&run).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "source_kind,label,e0,e1,e2,e3,e4,e5,e6,e7,e8,e9,e10,e11,e12,e13,e14,e15");
    // train(112) + heldout(8) + synthetic(20) + target(120)
    assert_eq!(lines.count(), 112 + 8 + 20 + 120);
}
