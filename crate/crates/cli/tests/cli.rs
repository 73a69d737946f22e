use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use permres::data::write_ppm;

fn permres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permres")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    format!(
        r#"
batch_size = 8
lr_initial = 0.05
lr_drop_epochs = [1]
total_epochs = 2
master_seed = 5
output_dir = "{}"
record_wall_clock = false

[model]
variant = "improved"
num_classes = 4
base_width = 4
permutation_head = true

[dataset]
kind = "synthetic"
classes = 4
train_per_class = 4
test_per_class = 2
height = 32
width = 32
"#,
        dir.join("run").display()
    )
}

#[test]
fn train_eval_inspect_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, tiny_config(dir.path())).unwrap();

    let out = permres(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,lr,l_classification,l_permutation,l_std,l_mean,l_feature,l_total"));
    for name in ["final.ckpt", "epoch_0001.ckpt", "report.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }

    let ckpt = run.join("final.ckpt");
    let out = permres(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("on 8 images"));

    let image = dir.path().join("x.ppm");
    write_ppm(&image, 20, 24, &(0..3 * 20 * 24).map(|i| (i % 251) as u8).collect::<Vec<_>>()).unwrap();
    let maps = dir.path().join("maps");
    let out = permres(&[
        "inspect",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--stage",
        "3",
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pgms = fs::read_dir(&maps).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 16);
    assert!(maps.join("report.json").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, tiny_config(dir.path())).unwrap();
    let out = permres(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--batch-size",
        "7",
        "--lr-drop-epochs",
        "3,6",
        "--total-epochs",
        "9",
        "--feature-loss",
        "false",
        "--set",
        "loss.permutation_weight=0.25",
        "--print-config",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let table: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(table["batch_size"].as_integer(), Some(7));
    assert_eq!(table["lr_drop_epochs"].as_array().unwrap().len(), 2);
    assert_eq!(table["master_seed"].as_integer(), Some(5));
    assert_eq!(table["loss"]["use_feature_loss"].as_bool(), Some(false));
    assert_eq!(table["loss"]["permutation_weight"].as_float(), Some(0.25));
    assert_eq!(table["dataset"]["kind"].as_str(), Some("synthetic"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "batch_sise = 3\n").unwrap();
    assert_eq!(code(&permres(&["train", "--config", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&permres(&["train", "--lr-drop-epochs", "50,20", "--print-config"])), 1);
    assert_eq!(code(&permres(&["train", "--variant", "wide", "--print-config"])), 1);
    assert_eq!(code(&permres(&["train", "--batch-size", "0", "--print-config"])), 1);
    assert_eq!(code(&permres(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&permres(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let m = missing.to_str().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(code(&permres(&["train", "--set", &format!("dataset.dir=\"{m}\""), "--output-dir", o])), 2);
    assert_eq!(code(&permres(&["prepare-data", "--raw", m, "--out", o])), 2);
    assert_eq!(code(&permres(&["eval", "--checkpoint", &format!("{m}/final.ckpt")])), 2);
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, tiny_config(dir.path())).unwrap();
    let out = permres(&["train", "--config", cfg.to_str().unwrap(), "--lr-initial", "1e300", "--momentum", "0"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss at step"));
}
