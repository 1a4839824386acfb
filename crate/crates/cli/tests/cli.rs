use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_known = 3
n_nov_s = 1
n_nov_d = 1
samples_per_class = 8
val_per_class = 1
test_per_class = 3
n_z = 4
n_c = 8
l_pos = 2
n_neg = 6
batch_size = 8
epochs = 1
";

fn owsol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owsol"))
        .args(args)
        .env("OWSOL_WORKERS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = owsol(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("nope.cfg");
    let out = owsol(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "n_knwon = 3\n").unwrap();
    let out = owsol(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_knwon"));
}

#[test]
fn missing_dataset_is_a_filesystem_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = owsol(&[
        "train",
        "--data",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let (data, run) = (root.join("data"), root.join("run"));
    ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--mode", "colearn"]);
    assert!(run.join("header.json").exists());
    assert!(run.join("run_manifest.json").exists());

    ok(&["eval", "--checkpoint", s(&run), "--sweep"]);
    let report = run.join("eval-test");
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());
    let sweep = std::fs::read_to_string(report.join("theta_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 9);

    let maps = root.join("maps");
    ok(&["gcam-export", "--checkpoint", s(&run), "--split", "val", "--out", s(&maps)]);
    let boxes = std::fs::read_to_string(maps.join("boxes.csv")).unwrap();
    assert_eq!(boxes.lines().count(), 1 + 5);
    assert_eq!(std::fs::read_dir(maps.join("heatmaps")).unwrap().count(), 5);

    let stdout = ok(&["estimate-k", "--checkpoint", s(&run), "--k-min", "2", "--k-max", "8"]);
    let k_hat: usize = stdout.trim().strip_prefix("k_hat = ").unwrap().parse().unwrap();
    let csv = std::fs::read_to_string(run.join("estimate-k/estimate_k.csv")).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let best = rows.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let argmax = rows.iter().filter(|r| r.1 == best).map(|r| r.0).min().unwrap();
    assert_eq!(k_hat, argmax);
    assert!(rows.iter().all(|r| (2..=8).contains(&r.0)));
}

#[test]
fn ablation_writes_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("abl");
    ok(&["experiment", "ablation", "--config", s(&cfg), "--seeds", "1,2", "--out", s(&out)]);
    for name in ["ablation.csv", "ablation_seed1.csv", "ablation_seed2.csv"] {
        let csv = std::fs::read_to_string(out.join(name)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4, "{name}");
        assert_eq!(lines[0].split(',').count(), 7);
        let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        for m in ["ce_baseline", "scl_only", "scl_ocl", "colearn"] {
            assert!(modes.contains(&m), "{name}: {m}");
        }
    }
    assert!(out.join("ablation.json").exists());
}
