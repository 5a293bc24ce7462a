use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[data.synthetic]
n_stores = 4
n_states = 2
n_skus_per_store = 10
n_days = 500

[split]
train_start = 60
train_end = 300
forecast_start = 301
detect_start = 400
detect_end = 449
plan_day = 450

[scenario]
kind = "level_shock"
onset_day = 400
affected_fraction = 0.25

[features]
lag_days = [1, 7, 28]

[gbt]
n_trees = 40

[detector.autoencoder]
epochs = 100
"#;

fn driftguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftguard"))
        .args(args)
        .output()
        .expect("spawn")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn staged_commands_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let staged = dir.path().join("staged");
    let staged_s = staged.to_str().unwrap();
    for stage in ["generate", "train", "inject", "detect", "diagnose", "plan", "retrain"] {
        ok(&driftguard(&[stage, "--config", config, "--out", staged_s]));
    }
    let text = ok(&driftguard(&["evaluate", "--config", config, "--out", staged_s]));
    assert!(text.contains("WMAPE"), "{text}");

    let full = dir.path().join("full");
    ok(&driftguard(&[
        "run",
        "--config",
        config,
        "--out",
        full.to_str().unwrap(),
    ]));
    for artifact in ["report.json", "report.txt", "events.log", "plan/plan.json"] {
        assert_eq!(
            std::fs::read(staged.join(artifact)).unwrap(),
            std::fs::read(full.join(artifact)).unwrap(),
            "{artifact} differs"
        );
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&driftguard(&[
        "generate",
        "--config",
        config,
        "--out",
        a.to_str().unwrap(),
    ]));
    ok(&driftguard(&[
        "generate",
        "--config",
        config,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "6",
    ]));
    assert_ne!(
        std::fs::read(a.join("panel/clean.csv")).unwrap(),
        std::fs::read(b.join("panel/clean.csv")).unwrap()
    );
}

#[test]
fn default_config_round_trips() {
    let text = ok(&driftguard(&["default-config"]));
    assert!(text.contains("[scenario]") && text.contains("[detector.autoencoder]"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    std::fs::write(&path, text).unwrap();
    // a config error would exit 2 before anything runs
    let out = driftguard(&[
        "evaluate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(10));
}

#[test]
fn failures_exit_with_stage_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let out_dir = dir.path().join("empty");
    let out = out_dir.to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "bogus_key = 1\n").unwrap();
    assert_eq!(
        driftguard(&["run", "--config", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(
        driftguard(&["run", "--config", "/nonexistent/config.toml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        driftguard(&["ingest", "--config", config, "--out", out]).status.code(),
        Some(2)
    );

    for (stage, code) in [
        ("train", 4),
        ("inject", 5),
        ("detect", 6),
        ("diagnose", 7),
        ("plan", 8),
        ("retrain", 9),
        ("evaluate", 10),
    ] {
        let o = driftguard(&[stage, "--config", config, "--out", out]);
        assert_eq!(
            o.status.code(),
            Some(code),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(String::from_utf8_lossy(&o.stderr).contains(stage), "{stage}");
    }

    let m5 = dir.path().join("m5.toml");
    std::fs::write(
        &m5,
        "[data]\nsource = \"m5\"\n[data.m5]\nsales = \"/missing/sales.csv\"\ncalendar = \"/missing/calendar.csv\"\nprices = \"/missing/prices.csv\"\n",
    )
    .unwrap();
    assert_eq!(
        driftguard(&["ingest", "--config", m5.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn batch_writes_the_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("batch");
    let text = ok(&driftguard(&[
        "batch",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "2",
    ]));
    assert!(text.contains("2 seeds"), "{text}");
    assert!(out.join("batch.json").exists() && out.join("seed_01/report.json").exists());
}
