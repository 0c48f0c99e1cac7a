use std::path::Path;
use std::process::{Command, Output};

fn icnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icnet"))
        .args(args)
        .env_remove("DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn repo(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&icnet(&[])), 2);
    assert_eq!(code(&icnet(&["train"])), 2, "--out is required");
    assert_eq!(code(&icnet(&["train", "--ic", "sometimes", "--out", "x"])), 2);
    assert_eq!(code(&icnet(&["verify", "--check", "everything"])), 2);
    assert_eq!(code(&icnet(&["verify", "--k", "3"])), 2, "--k needs --cin and --cout");
    assert_eq!(code(&icnet(&["--help"])), 0);
}

#[test]
fn missing_data_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = icnet(&[
        "train", "--data", "mnist", "--data-dir", "/definitely/not/here", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    let o = icnet(&["train", "--data", "cifar10", "--model", &repo("configs/cnn4.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "no --data-dir and no DATA_DIR");
}

#[test]
fn bad_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name":"x","input":[1,4,4],"layers":[{"kind":"conv","channels":3,"colour":"red"}]}"#).unwrap();
    let o = icnet(&["analyze", "--model", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = icnet(&[
        "train", "--data", "xor", "--ic", "layer", "--lr", "1e30", "--epochs", "50", "--quiet", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn xor_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = icnet(&[
        "train", "--data", "xor", "--ic", "layer", "--epochs", "300", "--batch", "4", "--quiet", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_loss,train_acc,eval_loss,eval_acc,wall_seconds"));
    assert_eq!(lines.count(), 300);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 300);
    assert_eq!(summary["model"], "xor-ic");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["variant"], "ic_layer");
    assert!(std::fs::metadata(out.join("params.bin")).unwrap().len() > 0);
}

#[test]
fn verify_subset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = icnet(&[
        "verify", "--check", "collision", "--check", "overhead", "--trials", "200", "--k", "3", "--cin", "8", "--cout",
        "4", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("2 of 2 checks passed"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().map(Vec::len), Some(2));
}

#[test]
fn xor_dumps_region_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("regions.csv");
    let o = icnet(&["xor", "--seeds", "2", "--steps", "3000", "--dump-regions", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 512);
    assert!(rows.iter().all(|r| r.split(',').count() == 512));
    assert!(rows.iter().all(|r| r.split(',').all(|v| matches!(v, "0" | "1" | "2"))));
}

#[test]
fn analyze_writes_sweep_and_regions() {
    let dir = tempfile::tempdir().unwrap();
    let o = icnet(&[
        "analyze", "--model", &repo("configs/cnn4.json"), "--weights", "0.5,-1,2", "--regions", "collision", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("w_prime,cos_theta\n"));
    let cos: Vec<f64> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(cos.windows(2).all(|p| p[1] < p[0]));
    let regions = std::fs::read_to_string(dir.path().join("regions.csv")).unwrap();
    assert_eq!(regions.lines().count(), 512);
    assert!(regions.contains('2'));
}
