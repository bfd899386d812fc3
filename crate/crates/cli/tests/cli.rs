use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[run]
task = tiny
image_size = 8

[data]
generic.per_class = 6
intermediate.per_class = 6
target.per_class = 10

[pretrain]
variants = B
epochs = 1

[ssl]
epochs = 1
lr_halve_epoch = none

[finetune]
epochs = 1

[ensemble]
rf_trees = 5
gbt_rounds = 3
svm_max_iter = 200

[explain]
tsne_iters = 50
shap_samples = 32

[ood]
data.per_class = 6
";

fn etsef(dir: &Path, args: &[&str]) -> Output {
    let conf = dir.join("tiny.conf");
    if !conf.exists() {
        fs::write(&conf, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_etsef"))
        .arg("--config")
        .arg(&conf)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn every_subcommand_runs_and_prints_the_task_dir() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("out").join("tiny");
    for args in [
        &["ensemble"][..],
        &["ablate"],
        &["explain", "--what", "shap", "--instances", "0,1"],
        &["explain", "--what", "tsne"],
        &["oodtest"],
        &["synth"],
    ] {
        let o = etsef(dir.path(), args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o), task.display().to_string());
    }
    assert!(task.join("explain/shap_test1.csv").exists());
    assert!(task.join("ablate/ablation_seed42.csv").exists());
    let again = etsef(dir.path(), &["ensemble"]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("up to date"));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = etsef(dir.path(), &["--seed", "5", "synth"]);
    assert!(o.status.success());
    let manifest = fs::read_to_string(dir.path().join("out/tiny/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 5"), "{manifest}");
    assert!(manifest.contains("freeze_backbone = false"), "{manifest}");

    let o = etsef(dir.path(), &["--ssl-freeze-backbone", "synth"]);
    assert!(o.status.success());
    let manifest = fs::read_to_string(dir.path().join("out/tiny/manifest.txt")).unwrap();
    assert!(manifest.contains("freeze_backbone = true"), "{manifest}");
}

#[test]
fn config_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, "[run]\nseeds = 1\n").unwrap();
    assert_eq!(etsef(dir.path(), &["pretrain"]).status.code(), Some(2));
    fs::write(&conf, "[ensemble]\nweights = 1\n").unwrap();
    assert_eq!(etsef(dir.path(), &["pretrain"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("out/tiny");
    fs::create_dir_all(&task).unwrap();
    fs::write(task.join(".lock"), "").unwrap();
    let o = etsef(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("another run"));

    let dir = tempfile::tempdir().unwrap();
    let o = etsef(dir.path(), &["oodtest", "--source", "/nonexistent/task"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tampered_output_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert!(etsef(dir.path(), &["finetune"]).status.success());
    let weights = dir.path().join("out/tiny/finetune/B-SSL.weights");
    let mut bytes = fs::read(&weights).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&weights, bytes).unwrap();
    assert_eq!(etsef(dir.path(), &["finetune"]).status.code(), Some(4));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(etsef(dir.path(), &["explain", "--what", "lime"]).status.code(), Some(2));
}
