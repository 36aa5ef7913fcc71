//! End-to-end tests of the command-line binary.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fpquant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fpquant")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_owned)
        .collect()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fpquant-cli-{}-{name}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn grid_lists_all_values_of_a_small_format() {
    let out = run(&["grid", "--format", "2M2E:b=2"]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "value");
    let values: Vec<f64> = lines[1..].iter().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 31);
    assert!(values.contains(&0.125));
    assert!(values.contains(&3.5));
    assert!(values.contains(&-3.5));
    assert!(values.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn grid_lists_int8_codes() {
    let out = run(&["grid", "--format", "INT8:s=1"]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    let values: Vec<f64> = lines[1..].iter().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 256);
    assert_eq!(values[0], -128.0);
    assert_eq!(*values.last().unwrap(), 127.0);
}

#[test]
fn invalid_format_exits_2() {
    let out = run(&["grid", "--format", "9M9E"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = scratch("config");
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, r#"{"grid": {"format": "2M2E:b=2"}}"#).unwrap();

    let out = run(&["grid", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout_lines(&out).len(), 32);

    // A flag on the command line overrides the config value.
    let bad = dir.join("bad.json");
    fs::write(&bad, r#"{"grid": {"format": "9M9E"}}"#).unwrap();
    let out = run(&["grid", "--config", bad.to_str().unwrap(), "--format", "INT4:s=1"]);
    assert!(out.status.success());
    assert_eq!(stdout_lines(&out).len(), 17);

    // Unknown keys are rejected.
    let unk = dir.join("unk.json");
    fs::write(&unk, r#"{"grid": {"formatt": "2M2E:b=2"}}"#).unwrap();
    let out = run(&["grid", "--config", unk.to_str().unwrap(), "--format", "INT4:s=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn learn_is_deterministic_and_documents_its_prng() {
    let dir = scratch("learn");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for path in [&a, &b] {
        let out = run(&[
            "learn",
            "--seed", "7",
            "--samples", "2000",
            "--iters", "20",
            "--output", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bytes_a = fs::read(&a).unwrap();
    assert_eq!(bytes_a, fs::read(&b).unwrap(), "same seed must give identical output");
    let text = String::from_utf8(bytes_a).unwrap();
    assert!(text.starts_with("iter,c,m,loss\n"));
    assert_eq!(text.lines().count(), 22); // header + initial point + 20 iterations

    let meta = fs::read_to_string(dir.join("a.csv.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["prng"], "ChaCha8");
    assert_eq!(meta["seed"], 7);
}

#[test]
fn quantize_keeps_grid_points_bit_exact() {
    let dir = scratch("quantize");
    let input = dir.join("in.csv");
    // All of these are exact members of the 2M2E:b=2 grid (and exact in f32).
    let points = [0.125f64, 0.25, 0.375, 1.5, 3.5, -3.5, 0.0, -0.875];
    fs::write(
        &input,
        points.iter().map(|v| format!("{v}\n")).collect::<String>(),
    )
    .unwrap();
    let output = dir.join("out.bin");
    let report = dir.join("report.json");
    let out = run(&[
        "quantize",
        "--input", input.to_str().unwrap(),
        "--format", "2M2E:b=2",
        "--output", output.to_str().unwrap(),
        "--report", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bytes = fs::read(&output).unwrap();
    assert_eq!(bytes.len(), 4 * points.len());
    for (chunk, &want) in bytes.chunks_exact(4).zip(&points) {
        let got = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        assert_eq!(got.to_bits(), (want as f32).to_bits(), "{want} not preserved");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["mse"], 0.0);
}

#[test]
fn empty_input_exits_2() {
    let dir = scratch("empty");
    let input = dir.join("empty.csv");
    fs::write(&input, "").unwrap();
    let out = run(&["search", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_reports_format_and_clip_as_json() {
    let dir = scratch("search");
    let input = dir.join("in.csv");
    // A fixed quasi-Gaussian sample: sum of three linear congruential draws.
    let mut state = 1u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let text: String = (0..2000)
        .map(|_| format!("{}\n", (next() + next() + next() - 1.5) * 2.0))
        .collect();
    fs::write(&input, text).unwrap();
    let out = run(&["search", "--input", input.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(v["m"].as_u64().is_some());
    assert!(v["e"].as_u64().is_some());
    assert!(v["c"].as_f64().unwrap() > 0.0);
    assert!(v["mse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn verify_passes_clean_and_catches_injected_fault() {
    let clean = run(&["verify", "--trials", "2000"]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stderr));
    assert!(String::from_utf8_lossy(&clean.stdout).contains("total mismatches: 0"));

    let faulty = run(&["verify", "--trials", "2000", "--inject-fault"]);
    assert_eq!(faulty.status.code(), Some(1));
}
