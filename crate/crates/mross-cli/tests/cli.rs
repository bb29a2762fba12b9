use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mross::data::{CaseSpec, DatasetStream};

fn mross(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mross"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "case = 1\nn = 2500\nd = 3\nr0 = 50\nr_list = 150\ns = 1\nseed = 5\nworkers = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn mse_runs_are_reproducible_and_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");

    let a = mross(&["mse", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    assert!(a.status.success(), "stderr: {}", String::from_utf8_lossy(&a.stderr));
    let b = mross(&["mse", "--config", &cfg, "--out", out_b.to_str().unwrap()]);
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let c = mross(&["mse", "--config", &cfg, "--workers", "3"]);
    assert!(c.status.success());
    assert_eq!(a.stdout, c.stdout);

    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,r,mse,sd,failures"));
    assert_eq!(lines.clone().count(), 3);
    for line in lines {
        assert!(line.ends_with(",0"), "no failures expected: {line}");
    }
}

#[test]
fn unknown_config_key_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "bogus = 3\n").unwrap();
    let out = mross(&["mse", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bogus"), "stderr should name the key: {stderr}");
}

#[test]
fn zero_repetition_timing_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("none.cfg");
    fs::write(
        &path,
        "case = 1\nn = 2500\nd = 3\nr0 = 50\nr_list = 150\ns = 0\nworkers = 1\n",
    )
    .unwrap();
    let out = mross(&["timing", "--config", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "method,r,mean_s,sd_s,failures\n"
    );
}

#[test]
fn fit_prints_one_interval_row_per_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let points = DatasetStream::from_case(CaseSpec::new(1, 1500, 3, 77).unwrap())
        .unwrap()
        .materialize()
        .unwrap();
    let data = dir.path().join("points.csv");
    let mut text = String::from("y,f1,f2\n");
    for p in &points {
        text.push_str(&format!("{},{},{}\n", p.y, p.x[1], p.x[2]));
    }
    fs::write(&data, text).unwrap();
    let cfg = dir.path().join("fit.cfg");
    fs::write(&cfg, "r0 = 60\nr_list = 200\nseed = 31\n").unwrap();

    let out = mross(&[
        "fit",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("coord,estimate,lower,upper"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for (j, row) in rows.iter().enumerate() {
        let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, j);
        assert!(cols[1].is_finite());
        assert!(cols[2] <= cols[1] && cols[1] <= cols[3]);
    }
}
