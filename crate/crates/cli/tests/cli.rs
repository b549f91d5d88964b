use std::path::Path;
use std::process::{Command, Output};

fn urbanssl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urbanssl")).args(args).current_dir(cwd).output().expect("binary runs")
}

const SMALL: &[&str] = &["--cities", "4", "--pretrain-cities", "2", "--samples", "20"];

const SMALL_EXPERIMENT: &str = r#"
experiment = "generalizability"
workflows = ["v2", "random_init"]
seeds = [0]

[data]
cities = 4
samples_per_city = 20
tile_px = 32

[pretrain]
cities = 2
steps = 30
batch_size = 8
queue_size = 32

[probe]
epochs = 20
"#;

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanssl(&["report", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = urbanssl(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanssl(&["report", "--results", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no report.csv"));
}

#[test]
fn pretrain_writes_checkpoint_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["pretrain", "--workflow", "v2", "--steps", "200", "--batch-size", "16", "--queue-size", "64"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", "ckpt"]);
    let out = urbanssl(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ckpt/checkpoint.bin").is_file());
    let loss = std::fs::read_to_string(dir.path().join("ckpt/loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 201);

    let mut args = vec!["probe", "--checkpoint", "ckpt/checkpoint.bin", "--epochs", "5", "--out", "probe"];
    args.extend_from_slice(SMALL);
    let out = urbanssl(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("probe/probe.json").is_file());
    assert_eq!(std::fs::read_to_string(dir.path().join("probe/per_class.csv")).unwrap().lines().count(), 5);
}

#[test]
fn experiment_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL_EXPERIMENT).unwrap();
    for out_dir in ["a", "b"] {
        let out = urbanssl(&["experiment", "--config", "small.toml", "--seed", "7", "--out", out_dir], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for rel in ["generalizability/report.csv", "generalizability/v2/satellite/report.csv"] {
        let a = std::fs::read(dir.path().join("a").join(rel)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between runs");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/generalizability/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(dir.path().join("a/generalizability/v2/satellite/seed-7/loss.csv").is_file());

    let out = urbanssl(&["report", "--results", "a"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| generalizability | satellite | v2 | 7 |"));
}

#[test]
fn manifest_renders_an_offline_cache() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["manifest", "--synthetic", "3", "--samples", "4", "--tile-px", "16", "--out", "m.json", "--cache-dir", "tiles"];
    let out = urbanssl(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = urbanssl::tiles::DatasetManifest::load(&dir.path().join("m.json")).unwrap();
    assert_eq!(manifest.records.len(), 3 * 4 * 2);
    for r in &manifest.records {
        assert!(dir.path().join("tiles").join(&r.cache_path).is_file());
    }
}

#[test]
fn online_mode_needs_the_network_client() {
    let dir = tempfile::tempdir().unwrap();
    let args =
        ["--offline", "false", "manifest", "--synthetic", "1", "--samples", "2", "--out", "m.json", "--cache-dir", "t"];
    let out = urbanssl(&args, dir.path());
    if cfg!(feature = "online") {
        return;
    }
    assert_eq!(out.status.code(), Some(1));
}
