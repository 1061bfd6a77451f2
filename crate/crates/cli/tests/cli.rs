use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn metaproto(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaproto"))
        .args(args)
        .args(["--data-dir", dir.join("data").to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap()])
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// First token of every `hash  path` line.
fn hashes(o: &Output) -> Vec<String> {
    stdout(o).lines().filter_map(|l| l.split_whitespace().next().map(str::to_string)).collect()
}

const TINY: &[&str] = &["--budget", "0.01", "--episodes", "40"];

#[test]
fn gen_data_is_deterministic_and_refuses_overwrite() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for study in ["sinusoid", "gaussian"] {
        let args = ["gen-data", "--study", study, "--seed", "7"];
        let first = metaproto(a.path(), &args);
        assert_ok(&first);
        let second = metaproto(b.path(), &args);
        assert_ok(&second);
        assert_eq!(hashes(&first), hashes(&second), "{study}");

        let again = metaproto(a.path(), &args);
        assert_eq!(again.status.code(), Some(2), "{study} overwrite without --force");
        let forced = metaproto(a.path(), &[&args[..], &["--force"]].concat());
        assert_ok(&forced);
        assert_eq!(hashes(&forced), hashes(&first));
    }
}

#[test]
fn missing_prerequisites_exit_4() {
    let dir = TempDir::new().unwrap();
    let train = metaproto(dir.path(), &[&["train", "--study", "sinusoid"], TINY].concat());
    assert_eq!(train.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&train.stderr).contains("gen-data"));
    let build = metaproto(dir.path(), &["build-targets", "--study", "gaussian"]);
    assert_eq!(build.status.code(), Some(4));
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = metaproto(dir.path(), &["gen-data", "--study", "sinusoid", "--algorithm", "protonet"]);
    assert_eq!(o.status.code(), Some(2));
    let o = metaproto(dir.path(), &["gen-data", "--study", "sinusoid", "--budget", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_denoise_passes() {
    let o = metaproto_plain(&["check-denoise", "--samples", "20000", "--seed", "3"]);
    assert_ok(&o);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["violations"], 0);
}

fn metaproto_plain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaproto")).args(args).output().expect("binary runs")
}

#[test]
fn export_boundary_writes_full_grid() {
    let dir = TempDir::new().unwrap();
    assert_ok(&metaproto(dir.path(), &["gen-data", "--study", "gaussian"]));
    let path = dir.path().join("grid.json");
    let o = metaproto(
        dir.path(),
        &[
            "export-boundary",
            "--study",
            "gaussian",
            "--source",
            "bayes",
            "--resolution",
            "60",
            "--episode",
            "2",
            "--output",
            path.to_str().unwrap(),
        ],
    );
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let cells = v["grid"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3600);
    assert!(cells.iter().all(|c| (0.0..=1.0).contains(&c["max_prob"].as_f64().unwrap())));

    let low = metaproto(dir.path(), &["export-boundary", "--study", "gaussian", "--resolution", "10"]);
    assert_eq!(low.status.code(), Some(2));
}

#[test]
fn train_then_eval_reproduces_summary() {
    let dir = TempDir::new().unwrap();
    let gen = [&["gen-data", "--study", "sinusoid"], TINY].concat();
    assert_ok(&metaproto(dir.path(), &gen));
    for protocol in ["sq", "st"] {
        let args = [&["--study", "sinusoid", "--algorithm", "protoreg", "--protocol", protocol], TINY].concat();
        let train = metaproto(dir.path(), &[&["train"], &args[..]].concat());
        assert_ok(&train);
        let trained_row = stdout(&train).lines().nth(1).unwrap().to_string();

        let eval = metaproto(dir.path(), &[&["eval"], &args[..]].concat());
        assert_ok(&eval);
        assert_eq!(stdout(&eval).lines().nth(1).unwrap(), trained_row, "{protocol}");

        let again = metaproto(dir.path(), &[&["train"], &args[..]].concat());
        assert_eq!(again.status.code(), Some(2), "retrain without --force");
    }
}
