use std::path::Path;
use std::process::{Command, Output};

fn cfdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"
epochs = 1
lr = 0.002
batch_labeled = 2
batch_unlabeled = 2

[t1]
n_filters = 2

[fa]
n_filters = 2

[segnet]
depth = 2
base_channels = 4

[split]
labeled_fraction = 0.25
n_test = 1

[data]
source = "phantom"
n_subjects = 4
seed = 3

[data.phantom]
shape = [16, 16, 4]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let stdout = ok(&cfdseg(&["train", "--config", &config, "--out", run.to_str().unwrap()]));
    assert!(stdout.contains("trained 1 epochs"));
    for f in ["checkpoint.json", "steps.csv", "epochs.csv", "loss.png", "split.jsonl", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ck = run.join("checkpoint.json");
    let eval_dir = dir.path().join("eval");
    let stdout = ok(&cfdseg(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]));
    assert!(stdout.contains("DSC (%)"));
    assert!(eval_dir.join("metrics.csv").exists());

    // A different config is refused unless forced.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("epochs = 1", "epochs = 2")).unwrap();
    let refused = cfdseg(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("checkpoint rejected"));
    ok(&cfdseg(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--config", other.to_str().unwrap(), "--force"]));
}

#[test]
fn phantom_volumes_evaluate_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let stdout = ok(&cfdseg(&["phantom", "--out", data.to_str().unwrap(), "--subjects", "2", "--seed", "1"]));
    assert!(stdout.contains("wrote 2 subjects"));
    assert!(data.join("phantom_000/fa.nii.gz").exists());

    let config = write_config(dir.path(), &TINY.replace("shape = [16, 16, 4]", "shape = [32, 32, 16]"));
    let run = dir.path().join("run");
    ok(&cfdseg(&["train", "--config", &config, "--out", run.to_str().unwrap()]));
    std::fs::remove_file(data.join("phantom_001/t1.nii.gz")).unwrap();
    let out = cfdseg(&["evaluate", "--checkpoint", run.join("checkpoint.json").to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let stdout = ok(&out);
    assert!(stdout.contains("phantom_000"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed phantom_001"));
}

#[test]
fn ablate_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("abl");
    let stdout = ok(&cfdseg(&["ablate", "--axis", "M", "--values", "1,3", "--config", &config, "--out", out.to_str().unwrap()]));
    assert!(stdout.contains("M=1") && stdout.contains("M=3"));
    assert!(out.join("ablation_M.txt").exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "epsilon = 0.5\n");
    let out = cfdseg(&["train", "--config", &config, "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert!(!cfdseg(&["ablate", "--axis", "depth", "--values", "1"]).status.success());
}
