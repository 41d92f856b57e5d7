use std::path::Path;
use std::process::{Command, Output};

fn ic_lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ic-lab"))
        .args(args)
        .env("IC_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "seed = 3\nn = 1\nlayout = v1\nnum_classes = 3\nepochs = 2\nbatch_size = 8\n\
         synthetic_train_size = 24\nsynthetic_test_size = 9\nimage_size = 8\nbase_width = 4\n\
         output_dir = {}\n{extra}",
        dir.join("cfg-out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn theorem1_hundred_records_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ic_lab(&["verify-theorem1", "--p", "0.95", "--trials", "100"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("PASS verify-theorem1"), "{stdout}");
    let json = read_json(&dir.path().join("theorem1.json"));
    let records = json["records"].as_array().unwrap();
    assert_eq!(records.len(), 100);
    assert!(records.iter().all(|r| r["pass"] == true));
    let csv = std::fs::read_to_string(dir.path().join("theorem1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ic_lab(&["train", "missing.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ic_lab(&["verify-theorem1", "--p", "0.5", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = ic_lab(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "batch_size = 1\n");
    let out = ic_lab(&["train", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}

#[test]
fn arch_dump_counts_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("arch.cfg");
    std::fs::write(&cfg, "n = 2\nlayout = v1\nnum_classes = 10\n").unwrap();
    let out = ic_lab(&["arch-dump", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let json = read_json(&dir.path().join("arch.json"));
    assert_eq!(json["weighted_layers"], 14);
    assert_eq!(json["stage_output_shapes"][2], serde_json::json!([1, 64, 8, 8]));
    assert!(dir.path().join("arch.csv").exists());
}

#[test]
fn train_writes_outputs_to_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let env_out = dir.path().join("env-out");
    let out = ic_lab(&["train", cfg.to_str().unwrap()], &env_out);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "timing.csv", "report.json", "model.ickpt", "config.cfg"] {
        assert!(env_out.join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("cfg-out").exists());
    let metrics = std::fs::read_to_string(env_out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,lr,train_loss,train_acc,test_loss,test_acc");
    assert_eq!(metrics.lines().count(), 3);

    let again = dir.path().join("env-out-2");
    assert_eq!(ic_lab(&["train", cfg.to_str().unwrap()], &again).status.code(), Some(0));
    for f in ["metrics.csv", "report.json", "model.ickpt"] {
        assert_eq!(std::fs::read(env_out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exploding_run_fails_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "base_lr = 1e30\n");
    let out = ic_lab(&["train", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = read_json(&dir.path().join("nan_dump.json"));
    assert!(dump["layer_norms"].as_array().unwrap().len() > 5);
}

#[test]
fn correlation_race_and_zigzag() {
    let dir = tempfile::tempdir().unwrap();
    let out = ic_lab(&["verify-correlation", "--p", "0.5,0.95", "--c", "0,0.8", "--samples", "20000"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(read_json(&dir.path().join("correlation.json"))["records"].as_array().unwrap().len(), 4);

    let out = ic_lab(&["whiten-race", "--kappa", "100", "--dim", "8"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("whiten_race.csv").exists());

    let out = ic_lab(&["whiten-race", "--kappa", "1", "--dim", "4", "--min-speedup", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let cfg = tiny_config(dir.path(), "");
    let out = ic_lab(&["diagnose-zigzag", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let z = read_json(&dir.path().join("zigzag.json"));
    assert_eq!(z["report"]["relu_fed"]["coherent_fraction"], 1.0);
}
