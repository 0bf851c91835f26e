//! End-to-end tests of the `qdtwin` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qdtwin::io::write_tags_binary;
use qdtwin::pipeline::Manifest;
use qdtwin::tags::TimeTagStream;
use serde_json::Value;

fn qdtwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdtwin")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = qdtwin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn ghz_preset_writes_two_tag_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let v = ok_json(&["simulate", "--preset", "paper-ghz", "--pulses", "100000", "--out", p(&run)]);
    assert_eq!(v["period_ps"], 781);
    let names: Vec<String> = sorted_files(&run).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["hbt_a.qtt", "hbt_b.qtt", "manifest.json"]);
    let m = Manifest::read(&run.join("manifest.json")).unwrap();
    assert_eq!(m.body.period_ps, 781);
    assert_eq!(m.body.rep_rate_hz, 1_280_000_000);
    assert_eq!(m.hash, v["manifest_hash"].as_str().unwrap());
}

#[test]
fn same_seed_gives_identical_files_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut contents = Vec::new();
    for (i, threads) in ["1", "1", "2"].iter().enumerate() {
        let run = dir.path().join(format!("run{i}"));
        ok_json(&["--threads", threads, "simulate", "--preset", "paper-hom-2ns", "--pulses", "50000", "--out", p(&run)]);
        ok_json(&["--threads", threads, "analyze", "--input", p(&run)]);
        contents.push(sorted_files(&run));
    }
    assert_eq!(contents[0].len(), 10);
    assert_eq!(contents[0], contents[1]);
    assert_eq!(contents[0], contents[2]);
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok_json(&["simulate", "--preset", "paper-80mhz", "--pulses", "20000", "--out", p(&dir.path().join("a"))]);
    let b = ok_json(&["simulate", "--preset", "paper-80mhz", "--pulses", "20000", "--seed", "7", "--out", p(&dir.path().join("b"))]);
    assert_ne!(a["manifest_hash"], b["manifest_hash"]);
}

#[test]
fn empty_tag_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok_json(&["simulate", "--preset", "paper-80mhz", "--pulses", "20000", "--out", p(&run)]);
    let m = Manifest::read(&run.join("manifest.json")).unwrap();
    let empty = TimeTagStream::new(0, Vec::new(), 1000).unwrap();
    write_tags_binary(&[&empty], &m.hash_bytes().unwrap(), fs::File::create(run.join("hbt_a.qtt")).unwrap()).unwrap();
    let out = qdtwin(&["analyze", "--input", p(&run)]);
    assert_eq!(out.status.code(), Some(3));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "data");
    assert!(e["error"]["message"].as_str().unwrap().contains("no time tags"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = qdtwin::config::preset("paper-80mhz").unwrap().to_toml();
    let bad = text.replace("window = 3000.0", "window = 20000.0");
    assert_ne!(bad, text);
    let path = dir.path().join("bad.toml");
    fs::write(&path, bad).unwrap();
    let out = qdtwin(&["simulate", "--config", p(&path), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("analysis.window"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn budget_rows() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/budget-80mhz.toml");
    let v = ok_json(&["budget", "--config", p(&cfg)]);
    let rows = v["rows"].as_array().unwrap();
    let src = |i: usize| rows[i]["eta_source"]["value"].as_f64().unwrap();
    assert_eq!(format!("{:.1}", 100.0 * src(0)), "53.7");
    assert_eq!(format!("{:.1}", 100.0 * src(1)), "13.4");
    assert_eq!(src(2), 0.0);
    assert!(rows.iter().all(|r| r["inconsistent"] == false));

    let out = qdtwin(&["--format", "csv", "budget", "--config", p(&cfg)]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("key,value\n"));
}

#[test]
fn wrong_file_format_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok_json(&["simulate", "--preset", "paper-80mhz", "--pulses", "20000", "--out", p(&run)]);
    fs::write(run.join("hbt_b.qtt"), "channel,time_ps\n1,100\n").unwrap();
    let out = qdtwin(&["analyze", "--input", p(&run)]);
    assert_eq!(out.status.code(), Some(3));

    let out = qdtwin(&["fit-decay", "--input", p(&run.join("hbt_a.qtt")), "--t-start", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fit_decay_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decay.csv");
    let mut text = String::from("time_ps,counts\n");
    for i in 0..500 {
        let t = 4.0 * i as f64;
        text += &format!("{t},{}\n", (1e4 * (-t / 77.0).exp() + 5.0).round());
    }
    fs::write(&path, text).unwrap();
    let v = ok_json(&["fit-decay", "--input", p(&path), "--t-start", "0", "--model", "mono"]);
    assert!((v["t1_fast"].as_f64().unwrap() - 77.0).abs() < 0.5, "{v}");
}

#[test]
fn fit_fano_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.csv");
    let mut text = String::from("wavelength_nm,intensity\n");
    for i in 0..401 {
        let l = 935.0 + 0.02 * i as f64;
        let e = 2.0 * (l - 939.0) / 0.6;
        text += &format!("{l},{}\n", 50.0 * (e - 0.5f64).powi(2) / (1.0 + e * e) + 10.0);
    }
    fs::write(&path, text).unwrap();
    let v = ok_json(&["fit-fano", "--input", p(&path), "--lo", "936", "--hi", "942"]);
    assert!((v["lambda_m"].as_f64().unwrap() - 939.0).abs() < 1e-4, "{v}");
    assert!((v["q_factor"]["value"].as_f64().unwrap() - 939.0 / 0.6).abs() < 1.0, "{v}");
}

#[test]
fn sweep_emits_long_form_rows_in_order() {
    let out = qdtwin(&[
        "--format", "csv", "sweep", "--preset", "paper-hom-2ns", "--pulses", "10000",
        "--param", "power-ratio", "--values", "0.5,1.0", "--seeds", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("parameter,value,seed_index,seed,metric,estimate,stat_error"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r[0] == "power_ratio"));
    assert_eq!(rows[0][1], "0.5");
    assert_eq!(rows[7][1], "1.0");
    assert_eq!(rows[0][3], rows[4][3]);

    let out = qdtwin(&["sweep", "--preset", "paper-80mhz", "--param", "delay", "--values", "1000"]);
    assert_eq!(out.status.code(), Some(2));
}
