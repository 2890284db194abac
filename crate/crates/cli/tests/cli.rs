use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn taxiswalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxiswalk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_reproduces_reference_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let out = taxiswalk(&[
        "fit",
        "--data",
        s(&fixture("scenario1_sample.csv")),
        "--config",
        s(&fixture("scenario1.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fit: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit.json")).unwrap()).unwrap();
    let reference: Value =
        serde_json::from_slice(&std::fs::read(fixture("scenario1_reference.json")).unwrap())
            .unwrap();
    let ll = fit["loglik"].as_f64().unwrap();
    assert!((ll - reference["loglik"].as_f64().unwrap()).abs() < 1e-6);
    let params = fit["inference"]["parameters"].as_array().unwrap();
    assert_eq!(params.len(), 10);
    for p in params {
        let name = p["name"].as_str().unwrap();
        for (key, field) in [("estimates", "estimate"), ("std_errors", "std_error")] {
            let want = reference[key][name].as_f64().unwrap();
            let got = p[field].as_f64().unwrap();
            assert!((got - want).abs() < 1e-6, "{name} {field}: {got} vs {want}");
        }
    }
    let audit = fit["multistart_audit"].as_array().unwrap();
    assert_eq!(audit.len(), 10);
    assert_eq!(
        audit.iter().filter(|r| r["outcome"] == "selected").count(),
        1
    );
    for f in ["fit.txt", "params.json", "multistart.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn decode_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("decode.csv");
    let out = taxiswalk(&[
        "decode",
        "--data",
        s(&fixture("scenario1_sample.csv")),
        "--params",
        s(&fixture("scenario1_reference_params.json")),
        "--out",
        s(&csv),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "p_1", "p_2", "state"]);
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let p1: f64 = rec[1].parse().unwrap();
        let p2: f64 = rec[2].parse().unwrap();
        assert!((p1 + p2 - 1.0).abs() < 1e-12);
        let label: usize = rec[3].parse().unwrap();
        assert_eq!(label, if p2 > p1 { 2 } else { 1 });
        n += 1;
    }
    assert_eq!(n, 380);
}

#[test]
fn simulate_zero_reps_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = taxiswalk(&[
        "simulate",
        "--config",
        s(&fixture("scenario1.toml")),
        "--reps",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_seeded_and_reingests() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: &str| {
        let out = taxiswalk(&[
            "simulate",
            "--config",
            s(&fixture("scenario1.toml")),
            "--reps",
            "2",
            "--seed",
            seed,
            "--out",
            s(&dir.path().join(sub)),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(dir.path().join(sub).join("sim_0002.csv")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
    let path = dir.path().join("a/sim_0002.csv");
    let table =
        taxiswalk::io::read_trajectory(&path, taxiswalk::io::AngleUnits::Radians, false).unwrap();
    assert!(table.states.is_some() && table.positions.is_some());
}

#[test]
fn explore_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = taxiswalk(&[
        "explore",
        "--data",
        s(&fixture("scenario1_sample.csv")),
        "--out",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "distances.csv",
        "mixture.csv",
        "partition.csv",
        "interaction.csv",
    ] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.lines().count() >= 2, "{f}");
    }
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "t,y,d\n0,1,1\n1,1,-1\n2,1,1\n").unwrap();
    let out = taxiswalk(&["explore", "--data", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nstates = 2\ntargets = [\"den\"]\n").unwrap();
    let out = taxiswalk(&[
        "fit",
        "--data",
        s(&fixture("scenario1_sample.csv")),
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = taxiswalk(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
