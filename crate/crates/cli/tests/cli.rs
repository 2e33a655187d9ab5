//! End-to-end runs of the compiled binary on a tiny two-moons config.

use std::path::Path;
use std::process::{Command, Output};

use edens_core::data::Dataset;

const CONFIG: &str = r#"
pretrain_epochs = 10

[train]
members = 2
rank = 1
epochs = 1
batch_size = 16
seed = 5

[train.adv]
family = "fgsm"
eps = 0.05

[data]
kind = "two-moons"
n_train = 60
n_test = 20
noise = 0.12

[[attacks]]
family = "fgsm"
eps = 0.06

[[attacks]]
family = "pgd"
eps = 0.06
steps = 3
step_size = 0.02
random_init = true
"#;

fn edens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edens"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();

    let out = edens(dir.path(), &["pretrain", "--config", "cfg.toml", "--out", "base.ckpt"]);
    assert_ok(&out, "pretrain");
    assert!(dir.path().join("base.ckpt").exists());

    let out = edens(dir.path(), &["train", "--config", "cfg.toml", "--out", "model.ckpt"]);
    assert_ok(&out, "train");
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("model.history.json").exists());

    let eval = |out_dir: &str| {
        let out = edens(
            dir.path(),
            &["eval", "--config", "cfg.toml", "--victim", "model.ckpt", "--out-dir", out_dir],
        );
        assert_ok(&out, "eval");
        std::fs::read(dir.path().join(out_dir).join("report.csv")).unwrap()
    };
    let csv1 = eval("out1");
    let csv2 = eval("out2");
    assert_eq!(csv1, csv2, "reports must be byte-identical across runs");
    let text = String::from_utf8(csv1).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("policy,attack,eps,accuracy,proportion"));
    // 5 policies x (benign + 2 attacks).
    assert_eq!(lines.count(), 15);

    // Transfer mode with the baseline as surrogate.
    let out = edens(
        dir.path(),
        &[
            "eval", "--config", "cfg.toml", "--victim", "model.ckpt", "--surrogate", "base.ckpt",
            "--out-dir", "transfer",
        ],
    );
    assert_ok(&out, "transfer eval");
    let transfer = String::from_utf8(std::fs::read(dir.path().join("transfer/report.csv")).unwrap())
        .unwrap();
    assert_eq!(transfer.lines().count(), 16);

    let out = edens(
        dir.path(),
        &[
            "attack", "--config", "cfg.toml", "--victim", "model.ckpt", "--attack", "mim",
            "--eps", "0.05", "--steps", "4", "--out", "adv.json",
        ],
    );
    assert_ok(&out, "attack");
    let ds: Dataset =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv.json")).unwrap())
            .unwrap();
    assert_eq!(ds.n_samples(), 20);
    ds.validate().unwrap();

    let out = edens(
        dir.path(),
        &["dynamics", "--config", "cfg.toml", "--victim", "model.ckpt", "--out-dir", "dyn"],
    );
    assert_ok(&out, "dynamics");
    assert!(dir.path().join("dyn/dynamics.json").exists());

    // A baseline checkpoint cannot be evaluated as a victim.
    let out = edens(
        dir.path(),
        &["eval", "--config", "cfg.toml", "--victim", "base.ckpt", "--out-dir", "bad"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ensemble"));
}

#[test]
fn seed_override_changes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let run = |args: &[&str], out_dir: &str| {
        let mut full = vec!["report", "--config", "cfg.toml", "--out-dir", out_dir];
        full.extend_from_slice(args);
        let out = edens(dir.path(), &full);
        assert_ok(&out, "report");
        std::fs::read(dir.path().join(out_dir).join("report.json")).unwrap()
    };
    let base = run(&[], "a");
    let same = run(&[], "b");
    let other = run(&["--seed-override", "99"], "c");
    assert_eq!(base, same);
    assert_ne!(base, other);
}
