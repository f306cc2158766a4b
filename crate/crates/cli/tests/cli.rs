use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftlab::gradcheck::tiny_config;
use peftlab_cli::checkpoint::Checkpoint;
use peftlab_cli::commands::{METRICS_HEADER, STABILITY_HEADER, SWEEP_HEADER};
use peftlab_cli::config::{parse_config, to_json};
use tempfile::TempDir;

const QUICK: &str = r#"{
  "data": {"source_train": 400, "target_train": 40, "target_dev": 40, "target_test": 40},
  "train": {"pretrain_epochs": 2, "epochs": 2}
}"#;

fn peftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftlab"))
        .args(args)
        .arg("--quiet")
        .env_remove("PEFTLAB_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn generate_corpus_writes_splits_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", QUICK);
    let out = tmp.path().join("corpus");
    let o = peftlab(&["generate-corpus", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["sizes"]["source_train"], 400);
    assert_eq!(manifest["sizes"]["target_test"], 40);
    for name in ["source_train", "target_train", "target_dev", "target_test"] {
        let lines = String::from_utf8(read(&out.join(format!("{name}.jsonl")))).unwrap();
        let expected = manifest["sizes"][name].as_u64().unwrap() as usize;
        assert_eq!(lines.lines().count(), expected, "{name}");
    }
    let parallel = String::from_utf8(read(&out.join("target_train_parallel.jsonl"))).unwrap();
    assert_eq!(parallel.lines().count(), 40);

    let again = tmp.path().join("again");
    peftlab(&["generate-corpus", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(read(&out.join("target_dev.jsonl")), read(&again.join("target_dev.jsonl")));
}

#[test]
fn train_is_byte_deterministic_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", QUICK);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = peftlab(&["train", "--config", s(&cfg), "--out", s(dir)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "model.ckpt", "freeze_plan.txt", "config.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }

    let csv = String::from_utf8(read(&a.join("metrics.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let config = parse_config(&String::from_utf8(read(&a.join("config.json"))).unwrap()).unwrap();
    let (lambda, beta) = (config.loss.lambda, config.loss.beta);
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 1 + 2 * 2 + 1);
    for r in &rows {
        assert_eq!(r[0], "pair-adapters_plus_prompt-seed1");
        let v: Vec<f64> = r[7..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[3] - (v[0] + lambda * v[1] + beta * v[2])).abs() < 1e-6, "{r:?}");
    }

    // Checkpoint load → save is byte-stable and carries θ₀.
    let bytes = read(&a.join("model.ckpt"));
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);
    assert!(ckpt.theta0.is_some());
    let model = ckpt.restore(&config).unwrap();
    let again = Checkpoint::from_model(&model, ckpt.theta0_snapshot().as_ref());
    assert_eq!(again.to_bytes(), bytes);

    let o = peftlab(&["evaluate", "--out", s(&a)]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["run_id"], "pair-adapters_plus_prompt-seed1");
    assert!(report["test"]["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_override_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", QUICK);
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_peftlab"))
        .args(["train", "--quiet", "--config", s(&cfg), "--out", s(&out)])
        .env("PEFTLAB_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    let csv = String::from_utf8(read(&out.join("metrics.csv"))).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("pair-adapters_plus_prompt-seed7,7,"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = TempDir::new().unwrap();
    let low = write_config(
        tmp.path(),
        "low.json",
        r#"{"data": {"source_train": 400, "target_train": 41}}"#,
    );
    let o = peftlab(&["train", "--config", s(&low), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds source size"));

    let typo = write_config(tmp.path(), "typo.json", r#"{"loss": {"lamda": 1}}"#);
    let o = peftlab(&["train", "--config", s(&typo), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));

    let cfg = write_config(tmp.path(), "c.json", QUICK);
    let blocked = tmp.path().join("file");
    std::fs::write(&blocked, "").unwrap();
    let o = peftlab(&["generate-corpus", "--config", s(&cfg), "--out", s(&blocked.join("sub"))]);
    assert_eq!(o.status.code(), Some(1));

    let o = peftlab(&["stability", "--config", s(&cfg), "--out", s(&tmp.path().join("z")), "--seeds", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = peftlab(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("gradcheck ok"));

    let tmp = TempDir::new().unwrap();
    let mut plain = tiny_config();
    plain.loss.lambda = 0.0;
    plain.loss.beta = 0.0;
    let cfg = write_config(tmp.path(), "tiny.json", &to_json(&plain));
    let o = peftlab(&["gradcheck", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = peftlab(&["gradcheck", "--fault-op", "layer_norm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("block.0."));

    let big = write_config(tmp.path(), "big.json", "{}");
    let o = peftlab(&["gradcheck", "--config", s(&big)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stability_and_sweep_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", QUICK);
    let out = tmp.path().join("stab");
    let o = peftlab(&["stability", "--config", s(&cfg), "--out", s(&out), "--seeds", "1,2,3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read(&out.join("stability.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], STABILITY_HEADER);
    assert_eq!(lines.len(), 1 + 3 + 3);
    assert!(lines[4].starts_with("mean,") && lines[6].starts_with("score,"));
    let score: f64 = lines[6].rsplit(',').next().unwrap().parse().unwrap();
    assert!(score > 0.0 && score <= 1.0);

    let sweep = |dir: &Path| {
        let o = peftlab(&[
            "augment-sweep", "--config", s(&cfg), "--out", s(dir), "--ratios", "0,0.5", "--delta", "0.4",
            "--seeds", "1,2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read(&dir.join("sweep.csv"))
    };
    let first = sweep(&tmp.path().join("s1"));
    assert_eq!(first, sweep(&tmp.path().join("s2")));
    let text = String::from_utf8(first).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert!(lines[1].starts_with("0,0.4,2,40,"));
    assert!(lines[2].starts_with("0.5,0.4,2,60,"));
}
