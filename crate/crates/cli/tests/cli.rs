use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
experts = 3
hidden = 16
obs_features = 8
gate_hidden = [8]
blocks = 2
moe_every = 2
t_train = 10
inference_steps = 2
gating_batch = 16
samples_per_expert = 4
expert_batch = 4
buffer_capacity = 40
iterations = 6
"#;

fn dibm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dibm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dibm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A temp dir holding a small suite dataset and the tiny config.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&["gen-data", "--out", p(&dir.path().join("suite.bin")), "--demos", "2"]);
    dir
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [&[][..], &["frobnicate"][..], &["train", "--bogus"][..], &["eval"][..]] {
        let out = dibm(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"), "{args:?}");
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = workspace();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "expert_batch = 0\n").unwrap();
    let out = dibm(&["train", "--data", p(&dir.path().join("suite.bin")), "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expert_batch"));

    fs::write(&cfg, "betta = 0.1\n").unwrap();
    let out = dibm(&["train", "--data", p(&dir.path().join("suite.bin")), "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));
}

#[test]
fn seeded_training_is_reproducible_and_evaluates() {
    let dir = workspace();
    let (data, cfg) = (dir.path().join("suite.bin"), dir.path().join("tiny.toml"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--data", p(&data), "--config", p(&cfg), "--seed", "7", "--out", p(out)]);
    }
    let log = fs::read(a.join("loss.csv")).unwrap();
    assert_eq!(log, fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 7);

    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", p(&a.join("model.ckpt")), "--trials", "1", "--out", p(&ev)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    let rates: Vec<f64> = report["per_task"].as_array().unwrap().iter().map(|t| t["success_rate"].as_f64().unwrap()).collect();
    assert_eq!(rates.len(), 6);
    let total = report["total"].as_f64().unwrap();
    assert!((total - rates.iter().sum::<f64>() / 6.0).abs() < 1e-12);
    let traces = fs::read_to_string(ev.join("traces.csv")).unwrap();
    assert!(traces.starts_with("task,episode,timestep,phase,p0,p1,p2,expert,success"));
}

#[test]
fn sweep_writes_one_checkpoint_per_beta_and_a_merged_csv() {
    let dir = workspace();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep-beta",
        "--data",
        p(&dir.path().join("suite.bin")),
        "--config",
        p(&dir.path().join("tiny.toml")),
        "--probe",
        "8",
        "--out",
        p(&out),
    ]);
    for beta in ["1e-3", "3e-3", "1e-2"] {
        assert!(out.join(format!("beta_{beta}")).join("model.ckpt").exists(), "{beta}");
    }
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 8);
    assert!(csv.starts_with("beta,obs_index,c0,c1,c2"));
}

#[test]
fn finetune_and_embeddings_run_on_a_checkpoint() {
    let dir = workspace();
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&dir.path().join("suite.bin")), "--config", p(&dir.path().join("tiny.toml")), "--out", p(&run)]);
    let held = dir.path().join("held.bin");
    ok(&["gen-data", "--held-out", "--demos", "2", "--out", p(&held)]);
    let ft = dir.path().join("ft");
    let ckpt = run.join("model.ckpt");
    ok(&["finetune", "--checkpoint", p(&ckpt), "--data", p(&held), "--ratio", "0.5", "--out", p(&ft)]);
    assert!(ft.join("model.ckpt").exists());
    let out = dibm(&["finetune", "--checkpoint", p(&ckpt), "--data", p(&held), "--ratio", "1.5", "--out", p(&ft)]);
    assert!(!out.status.success());

    let emb = dir.path().join("emb.csv");
    ok(&["export-embeddings", "--checkpoint", p(&ckpt), "--data", p(&held), "--out", p(&emb)]);
    let text = fs::read_to_string(&emb).unwrap();
    assert!(text.starts_with("index,task,phase,expert,f0"));
    assert!(text.lines().count() > 1);
}
