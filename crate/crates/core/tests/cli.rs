use std::process::{Command, Output};

use serde_json::Value;
use vmonarch::bench::TIMING_FIELDS;
use vmonarch::matn::{self, MatnTensor};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmonarch-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let out = bench(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn dense_single_token_verifies_exactly() {
    let r = json(&["--mode", "dense", "--n", "1", "--d", "8", "--verify", "on"]);
    assert_eq!(r["max_abs_error"], 0.0);
}

#[test]
fn flash_512_matches_oracle() {
    let r = json(&["--mode", "flash", "--n", "512", "--d", "32", "--verify", "on", "--seed", "3"]);
    assert!(r["max_abs_error"].as_f64().unwrap() < 1e-4);
    assert!(r["rel_fro_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn preset_reports_sparsity() {
    let r = json(&["--mode", "vmonarch", "--preset", "wan-61f", "--d", "2"]);
    assert!((r["sparsity"].as_f64().unwrap() - 0.8736).abs() < 1e-4);
    assert_eq!(r["sparsity_approx"], 0.875);
    assert_eq!(r["reported_sparsity"], 0.875);
    assert_eq!(r["n"], 23296);
    assert!(r["flops_convention"].is_string());
}

#[test]
fn unverified_report_has_no_error_fields() {
    let r = json(&["--mode", "monarch", "--n", "64", "--d", "4"]);
    assert!(r.get("max_abs_error").is_none());
    assert!(r.get("rel_fro_error").is_none());
    assert_eq!(r["m"], 8);
}

#[test]
fn reports_are_reproducible_apart_from_timing() {
    let args = ["--mode", "vmonarch", "--frames", "3", "--height", "4", "--width", "4", "--d", "8", "--verify", "on"];
    let strip = |mut v: Value| {
        for f in TIMING_FIELDS {
            v.as_object_mut().unwrap().remove(*f);
        }
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(strip(json(&args)), strip(json(&args)));
}

#[test]
fn csv_output_has_header_and_row() {
    let out = bench(&["--mode", "flash", "--n", "32", "--d", "4", "--csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("mode,precision,"));
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn empty_sweep_prints_header_only() {
    let out = bench(&["--mode", "monarch", "--height", "2", "--width", "2", "--sweep", "5:4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("frames,n,"));
}

#[test]
fn sweep_records_refusals_and_continues() {
    let out = bench(&[
        "--mode", "monarch", "--height", "30", "--width", "100", "--d", "2", "--verify", "on", "--sweep", "1:5:2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let refused: Vec<&str> = text.lines().skip(1).map(|r| r.rsplit(',').next().unwrap()).collect();
    assert_eq!(refused.len(), 3);
    assert!(refused[0].is_empty(), "N=3000 runs");
    assert!(refused[1].contains("8192") && refused[2].contains("8192"), "{refused:?}");
}

#[test]
fn verify_cap_exits_with_refusal() {
    let out = bench(&["--mode", "flash", "--n", "8193", "--d", "2", "--verify", "on"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("8192"));
}

#[test]
fn bad_arguments_are_refused() {
    assert_eq!(bench(&["--mode", "vmonarch", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(bench(&["--mode", "monarch", "--n", "10", "--m", "3"]).status.code(), Some(2));
    assert_eq!(bench(&["--mode", "warp"]).status.code(), Some(2));
}

#[test]
fn matn_roundtrip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.matn"), dir.path().join("out.matn"));
    let (units, n, d) = (2u64, 16u64, 4u64);
    let data: Vec<f64> = (0..units * 3 * n * d).map(|i| (i % 7) as f64 * 0.25 - 0.7).collect();
    matn::write(&input, &MatnTensor::new(vec![units, 3, n, d], data).unwrap()).unwrap();
    let r = json(&[
        "--mode", "flash", "--heads", "2", "--precision", "f64", "--verify", "on",
        "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap(),
    ]);
    assert!(r["max_abs_error"].as_f64().unwrap() < 1e-12);
    let out = matn::read(&output).unwrap();
    assert_eq!(out.dims, vec![units, n, d]);
    assert_eq!(out.dtype(), vmonarch::DType::F64);
}

#[test]
fn corrupt_matn_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.matn");
    std::fs::write(&path, b"MATX\x01\x00\x00\x00").unwrap();
    let out = bench(&["--mode", "flash", "--in", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
