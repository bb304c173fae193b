use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fourstream"))
}

#[test]
fn unknown_command_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_1_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[fusion]\nstrategy = \"median\"\n").unwrap();
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fusion.strategy"), "stderr: {stderr}");
}

#[test]
fn invalid_profile_exits_1() {
    let out = bin().args(["synth", "--profile", "galactic"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("profile"));
}

fn run_ok(args: &[&str], extra: &[&Path]) {
    let mut cmd = bin();
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_commands_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &cfg_path,
        format!(
            r#"
seed = 3
output_dir = "{}"

[synth]
n_train = 24
n_val = 6
n_test = 6
image_size = 8

[train]
epochs = 1
batch_size = 8
"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let cfg: &[&Path] = &[&cfg_path];

    run_ok(&["synth", "--config"], cfg);
    let data = out_dir.join("synth");
    assert!(data.join("posts.tsv").exists());

    run_ok(&["preprocess", "--data", data.to_str().unwrap(), "--config"], cfg);
    assert!(out_dir.join("stats.toml").exists());

    for modality in ["title", "comments", "image", "metadata"] {
        run_ok(
            &["train-stream", "--data", data.to_str().unwrap(), "--modality", modality, "--config"],
            cfg,
        );
        assert!(out_dir.join("streams").join(format!("{modality}.ckpt")).exists());
        assert!(out_dir.join(format!("train_{modality}.csv")).exists());
    }

    run_ok(&["train-fusion", "--data", data.to_str().unwrap(), "--strategy", "sum", "--config"], cfg);
    assert!(out_dir.join("bundle").join("manifest.json").exists());
    let metrics = std::fs::read_to_string(out_dir.join("train_fusion.csv")).unwrap();
    assert!(metrics.starts_with("# config="), "metrics missing config hash: {metrics}");
    assert!(metrics.contains("epoch,train_loss,train_acc,val_acc"));

    run_ok(
        &[
            "evaluate",
            "--data",
            data.to_str().unwrap(),
            "--bundle",
            out_dir.join("bundle").to_str().unwrap(),
            "--split",
            "test",
            "--config",
        ],
        cfg,
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("evaluate.json")).unwrap())
            .unwrap();
    assert_eq!(eval["samples"], 6);
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(eval["config_hash"].as_str().unwrap().len() == 16);

    run_ok(&["gradcheck", "--config"], cfg);

    run_ok(&["ablate", "--data", data.to_str().unwrap(), "--config"], cfg);
    let report = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert!(report.starts_with("# config="));
    assert_eq!(report.trim_end().lines().count(), 19, "hash line + header + 17 rows");
    assert!(out_dir.join("ablation.md").exists());
}
