use std::path::Path;
use std::process::{Command, Output};

use diba::io;
use diba::Matrix;
use serde_json::Value;

fn diba(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diba")).args(args).current_dir(dir).output().expect("spawn diba")
}

fn ok_json(args: &[&str], dir: &Path) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = diba(&full, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn generate(dir: &Path, name: &str, kind: &str, rows: usize, cols: usize) {
    let (r, c) = (rows.to_string(), cols.to_string());
    let out = diba(&["generate", "--kind", kind, "--rows", &r, "--cols", &c, "--out", name], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn info_reports_embedding_storage() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&["info", "--shape", "30522x768", "--k", "2048", "--q", "32"], dir.path());
    assert_eq!(v["dense_bytes"].as_f64(), Some(93_763_584.0));
    assert_eq!(v["diba_bytes"].as_f64(), Some(8_143_592.0));
    assert_eq!(v["rho"], "0.0869");
}

#[test]
fn info_refuses_degenerate_k_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = diba(&["info", "--shape", "4x4", "--k", "16"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v = ok_json(&["info", "--shape", "4x4", "--k", "16", "--force"], dir.path());
    assert_eq!(v["k"], 16);
}

#[test]
fn fit_then_eval_and_info_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "a.mat", "gaussian", 20, 12);
    let fit = ok_json(&["fit", "--input", "a.mat", "--k", "5", "--out", "f.fac", "--trace", "t.jsonl"], d);
    let eval = ok_json(&["eval", "--input", "a.mat", "--factors", "f.fac"], d);
    assert_eq!(fit["snr_db"], eval["snr_db"]);
    let info = ok_json(&["info", "--factors", "f.fac"], d);
    assert_eq!(info["k"], 5);
    assert_eq!(info["container_bytes"], std::fs::metadata(d.join("f.fac")).unwrap().len());

    let trace = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let objectives: Vec<f64> = trace
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["objective"].as_f64().unwrap())
        .collect();
    assert!(objectives.len() > 1);
    assert_eq!(*objectives.last().unwrap(), fit["objective"].as_f64().unwrap());
}

#[test]
fn sweep_csv_parses_with_known_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "a.mat", "low-rank", 16, 16);
    let out = diba(&["sweep", "--input", "a.mat", "--ks", "2,4,128,1024"], d);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["matrix_id", "m", "n", "k", "rho", "snr_db", "iters", "flips", "status"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let statuses: Vec<&str> = rows.iter().map(|r| &r[8]).collect();
    assert_eq!(statuses, ["completed", "completed", "skipped_cap", "skipped_cap"]);
    for r in &rows {
        assert_eq!(&r[0], "a");
        if &r[8] == "completed" {
            r[5].parse::<f64>().unwrap();
        } else {
            assert!(r[5].is_empty());
        }
    }
}

#[test]
fn matvec_counts_multiplies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "a.mat", "gaussian", 10, 7);
    ok_json(&["fit", "--input", "a.mat", "--k", "3", "--out", "f.fac"], d);
    io::save_matrix(d.join("x.mat"), &Matrix::from_vec(7, 1, vec![1.0f32; 7]).unwrap()).unwrap();
    let v = ok_json(&["matvec", "--factors", "f.fac", "--x", "x.mat", "--count-multiplies"], d);
    assert_eq!(v["multiplies"], 10 + 3 + 7);
    assert_eq!(v["y"].as_array().unwrap().len(), 10);
}

#[test]
fn quantize_eval_and_scale_retune() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "a.mat", "heavy-rows", 12, 9);
    let q2 = ok_json(&["quantize", "--input", "a.mat", "--bits", "2", "--out", "q2.qnt"], d);
    let q4 = ok_json(&["quantize", "--input", "a.mat", "--bits", "4", "--out", "q4.qnt"], d);
    assert!(q4["snr_db"].as_f64() > q2["snr_db"].as_f64());
    let e4 = ok_json(&["eval", "--input", "a.mat", "--quant", "q4.qnt"], d);
    assert_eq!(e4["snr_db"], q4["snr_db"]);

    io::save_matrix(d.join("x.mat"), &Matrix::<f32>::identity(9)).unwrap();
    let rt = ok_json(
        &["quantize", "--input", "a.mat", "--bits", "4", "--out", "q4rt.qnt", "--scale-rt", "--calib", "x.mat",
          "--target", "a.mat", "--steps", "50", "--loss-curve", "curve.csv"],
        d,
    );
    assert!(rt["scale_rt_best_loss"].as_f64() <= rt["scale_rt_initial_loss"].as_f64());
    let curve = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,loss"));
}

#[test]
fn retune_keeps_binary_factors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "a.mat", "gaussian", 14, 10);
    ok_json(&["fit", "--input", "a.mat", "--k", "4", "--out", "f.fac"], d);
    io::save_matrix(d.join("x.mat"), &Matrix::<f32>::identity(10)).unwrap();
    let v = ok_json(
        &["retune", "--factors", "f.fac", "--calib", "x.mat", "--target", "a.mat", "--steps", "100",
          "--optimizer", "adam", "--out", "r.fac"],
        d,
    );
    assert!(v["final_loss"].as_f64() <= v["initial_loss"].as_f64());
    assert_eq!(v["trainable_scalars"], 14 + 4 + 10);
    let before = io::load_factors(d.join("f.fac")).unwrap().factors;
    let after = io::load_factors(d.join("r.fac")).unwrap().factors;
    assert_eq!(before.b1, after.b1);
    assert_eq!(before.b2, after.b2);
}

#[test]
fn errors_are_single_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let usage = diba(&["fit", "--k", "3"], d);
    assert_eq!(usage.status.code(), Some(2));
    let msg = String::from_utf8(usage.stderr).unwrap();
    assert!(msg.starts_with("error[usage]:") && msg.trim_end().lines().count() == 1, "{msg}");

    std::fs::write(d.join("bad.mat"), b"NOTAMATRIX").unwrap();
    let bad = diba(&["fit", "--input", "bad.mat", "--k", "3", "--out", "f.fac"], d);
    assert_eq!(bad.status.code(), Some(1));
    let msg = String::from_utf8(bad.stderr).unwrap();
    assert!(msg.starts_with("error[format]:") && msg.trim_end().lines().count() == 1, "{msg}");

    let missing = diba(&["eval", "--input", "nope.mat", "--factors", "f.fac"], d);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(String::from_utf8(missing.stderr).unwrap().trim_end().lines().count(), 1);

    generate(d, "a.mat", "gaussian", 4, 4);
    let zero_k = diba(&["fit", "--input", "a.mat", "--k", "0", "--out", "f.fac"], d);
    assert_eq!(zero_k.status.code(), Some(1));
    assert!(String::from_utf8(zero_k.stderr).unwrap().starts_with("error[invalid_argument]:"));
}
