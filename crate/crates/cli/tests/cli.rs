use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3
n_train_per_cluster = 40
n_eval = 12
total_steps = 60
expert_hidden = [12]
router_steps = 20
n_steps = 5
switching_prompts = 4
";

fn ddmlab(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ddmlab"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "stderr: {stderr}");
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stepwise_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(&ddmlab(d, &["gen-data"]));
    assert!(stdout.contains("eval items: 12"), "{stdout}");
    for k in ["0", "1", "2"] {
        ok(&ddmlab(d, &["train-expert", "--cluster", k]));
    }
    ok(&ddmlab(d, &["train-monolithic"]));
    ok(&ddmlab(d, &["train-router"]));
    for name in ["expert_0.ckpt", "monolithic.ckpt", "router.ckpt", "router_accuracy.csv", "loss_expert_2.csv"] {
        assert!(d.join(name).exists(), "{name}");
    }

    ok(&ddmlab(d, &["sample", "--count", "3"]));
    let bytes = fs::read(d.join("samples_routed.bin")).unwrap();
    let (header, values) = ddm_core::codec::decode(&bytes, ddm_core::datagen::DATASET_MAGIC).unwrap();
    assert_eq!(header.get("mode").unwrap(), "routed");
    assert_eq!(values.len() % 3, 0);

    ok(&ddmlab(d, &["sample", "--mode", "single", "--expert", "1", "--steps", "4"]));
    assert!(d.join("samples_single_1.bin").exists());
    ok(&ddmlab(d, &["sample", "--mode", "schedule", "--schedule", "0,1,0,1,2"]));
    let bad = ddmlab(d, &["sample", "--mode", "schedule", "--schedule", "0,1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("stage sample failed"));

    let table = ok(&ddmlab(d, &["compare"]));
    assert!(table.starts_with("metric,direction,ddm,baseline,improvement"), "{table}");
    assert_eq!(ok(&ddmlab(d, &["report"])), table);

    let spec = ok(&ddmlab(d, &["probe-specialization", "--expert", "2"]));
    assert!(spec.starts_with("expert 2:"), "{spec}");
    assert!(d.join("specialization_expert_2.json").exists());

    let sw = ok(&ddmlab(d, &["ablate-switching", "--pair", "0,2"]));
    assert!(sw.contains("preference:") && sw.contains("of 4"), "{sw}");
}

#[test]
fn failures_name_the_stage_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = ddmlab(d, &["sample", "--mode", "single"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage load-checkpoints failed"), "{err}");

    let out = ddmlab(d, &["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage report failed"));

    fs::write(d.join("tiny.toml"), "seed = 1\nn_steps = 0\n").unwrap();
    let out = ddmlab(d, &["gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let out = ddmlab(d, &["train-expert", "--cluster", "7"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage train-expert failed"));
}

#[test]
fn seed_flag_changes_the_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&ddmlab(a.path(), &["gen-data"]));
    ok(&ddmlab(b.path(), &["--seed", "9", "gen-data"]));
    let x = fs::read(a.path().join("dataset_train.bin")).unwrap();
    let y = fs::read(b.path().join("dataset_train.bin")).unwrap();
    assert_ne!(x, y);
}
