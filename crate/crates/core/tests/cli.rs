use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scsf")).args(args).output().expect("run scsf")
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out-dir", out, "--samples-per-day", "24"];
    args.extend_from_slice(extra);
    let o = scsf(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_fit_validate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    for name in ["clean.csv", "corrupted.csv", "truth.csv", "manifest.json"] {
        assert!(data.join(name).exists(), "{name}");
    }
    let corrupted = data.join("corrupted.csv");
    let corrupted = corrupted.to_str().unwrap();

    let fit_dir = dir.path().join("fit");
    let o = scsf(&["fit", "--input", corrupted, "--out-dir", fit_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], serde_json::Value::Bool(true));
    let series = fs::read_to_string(fit_dir.join("clear_sky.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 24 * 365);
    assert!(fit_dir.join("model.scsf").exists());
    assert!(!fit_dir.join("degradation.json").exists());

    let val_dir = dir.path().join("validate");
    let o = scsf(&["validate", "--input", corrupted, "--out-dir", val_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for name in ["cdf_train.csv", "cdf_test.csv", "summary.txt", "manifest.json"] {
        assert!(val_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &["--days", "30", "--seed", "9"]);
    synth(&b, &["--days", "30", "--seed", "9"]);
    for name in ["clean.csv", "corrupted.csv", "truth.csv", "synth_spec.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = dir.path().join("c");
    synth(&c, &["--days", "30", "--seed", "10"]);
    assert_ne!(fs::read(a.join("corrupted.csv")).unwrap(), fs::read(c.join("corrupted.csv")).unwrap());
}

#[test]
fn validate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &["--days", "80"]);
    let input = data.join("corrupted.csv");
    let mut summaries = Vec::new();
    for run in ["one", "two"] {
        let out = dir.path().join(run);
        let o = scsf(&[
            "validate", "--input", input.to_str().unwrap(), "--out-dir", out.to_str().unwrap(),
            "--test-frac", "0.1", "--seed", "7", "--k", "3", "--max-iter", "3",
        ]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
        summaries.push(fs::read(out.join("summary.txt")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let missing = dir.path().join("no_such_file.csv");
    let o = scsf(&["fit", "--input", missing.to_str().unwrap(), "--out-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_file.csv"));

    let data = dir.path().join("data");
    synth(&data, &["--days", "20"]);
    let input = data.join("clean.csv");
    let input = input.to_str().unwrap();
    let o = scsf(&["fit", "--input", input, "--out-dir", out, "--k", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank"));

    let o = scsf(&["validate", "--input", input, "--out-dir", out, "--test-frac", "1.5"]);
    assert_eq!(o.status.code(), Some(2));

    let o = scsf(&["synth", "--out-dir", out, "--latitude-proxy", "0.9"]);
    assert_eq!(o.status.code(), Some(2));

    let o = scsf(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &["--days", "40"]);
    let input = data.join("clean.csv");
    let before = fs::read(&input).unwrap();
    let out = dir.path().join("w");
    let o = scsf(&["weights", "--input", input.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&input).unwrap(), before);
    assert!(out.join("weights.csv").exists());
}
