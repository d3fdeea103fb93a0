use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mkv-fbsde"))
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn trivial() -> Value {
    json!({
        "seed": 3,
        "scenario": {"name": "trivial_constant", "params": {"value": 1.5}},
        "horizon": {"steps": 4},
        "solver": {"particles": 64, "basis_degree": 1}
    })
}

fn lq(rho: f64) -> Value {
    json!({
        "seed": 7,
        "scenario": {"name": "lq_mfg", "params": {"rho": rho}},
        "horizon": {"steps": 16},
        "solver": {"particles": 1024, "basis_degree": 1, "mean_regressor": true},
        "checks": {"master_residual": {"points": 10}, "identification": {"points": 10}}
    })
}

#[test]
fn solve_trivial_scenario_writes_constant_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &trivial());
    let out = tmp.path().join("out");
    let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("field.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[1], "y1:1");
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert!((rec[1].parse::<f64>().unwrap() - 1.5).abs() < 1e-12);
        assert!(rec[2].parse::<f64>().unwrap().abs() < 1e-12);
        rows += 1;
    }
    assert_eq!(rows, 5);
}

#[test]
fn lq_solve_reports_converged_law_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &lq(-0.5));
    let out = tmp.path().join("out");
    let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let d = read_json(&out.join("diagnostics.json"));
    let gap = d["final_gap"].as_f64().unwrap();
    assert!(gap < d["tol_law"].as_f64().unwrap(), "{d}");
    assert!(d["decoupling_residual"].as_f64().unwrap().is_finite());
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &lq(-0.5));
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    for cmd in ["solve", "lions", "master", "evaluate", "oracle"] {
        let r = run(&[cmd, "--config", &cfg, "--out", o]);
        assert_eq!(code(&r), 0, "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(
        code(&run(&[
            "check",
            "lq_validate",
            "--config",
            &cfg,
            "--out",
            o
        ])),
        0
    );
    let hash = read_json(&out.join("field.json"))["config_hash"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(hash.len(), 64);
    let mut seen = 0;
    for entry in fs::read_dir(&out).unwrap() {
        let p = entry.unwrap().path();
        match p.extension().and_then(|e| e.to_str()) {
            Some("json") => assert_eq!(
                read_json(&p)["config_hash"],
                hash.as_str(),
                "{}",
                p.display()
            ),
            Some("csv") => {
                let mut rdr = csv::Reader::from_path(&p).unwrap();
                let col = rdr
                    .headers()
                    .unwrap()
                    .iter()
                    .position(|h| h == "config_hash")
                    .unwrap();
                let first = rdr.records().next().unwrap().unwrap();
                assert_eq!(&first[col], hash, "{}", p.display());
            }
            _ => continue,
        }
        seen += 1;
    }
    assert_eq!(seen, 9);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &lq(-0.5));
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    for dir in [&a, &b] {
        assert_eq!(
            code(&run(&[
                "solve",
                "--config",
                &cfg,
                "--out",
                dir.to_str().unwrap()
            ])),
            0
        );
    }
    let o = run(&[
        "--seed",
        "8",
        "solve",
        "--config",
        &cfg,
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for f in [
        "field.csv",
        "field.json",
        "ensemble.csv",
        "diagnostics.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("field.csv")).unwrap(),
        fs::read(c.join("field.csv")).unwrap()
    );
}

#[test]
fn engineered_blow_up_exits_with_convergence_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = lq(-0.5);
    cfg["horizon"] = json!({"t_end": 50.0, "steps": 40});
    cfg["solver"] = json!({"particles": 256, "basis_degree": 1, "mean_regressor": true, "picard_max": 3,
                           "tol_law": 1e-14, "delta_min": 25.0});
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let o = run(&[
        "solve",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configuration_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let mut unknown = trivial();
    unknown["solver"]["particels"] = json!(10);
    let mut no_seed = trivial();
    no_seed.as_object_mut().unwrap().remove("seed");
    let mut bad_scenario = trivial();
    bad_scenario["scenario"]["name"] = json!("nope");
    for (name, cfg) in [
        ("unknown", unknown),
        ("no_seed", no_seed),
        ("scenario", bad_scenario),
    ] {
        let path = write_config(tmp.path(), &format!("{name}.json"), &cfg);
        let o = run(&["solve", "--config", &path, "--out", out]);
        assert_eq!(
            code(&o),
            3,
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn usage_errors_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &trivial());
    assert_eq!(code(&run(&["check", "no_such_check", "--config", &cfg])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["solve"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn hypotheses_fail_for_positive_tracking_weight() {
    let tmp = tempfile::tempdir().unwrap();
    for (rho, expected) in [(1.0, 5), (-1.0, 0)] {
        let cfg = write_config(tmp.path(), "c.json", &lq(rho));
        let o = run(&["check", "hypotheses", "--config", &cfg]);
        assert_eq!(code(&o), expected, "{}", String::from_utf8_lossy(&o.stderr));
        let report: Value = serde_json::from_slice(&o.stdout).unwrap();
        let min = report["metrics"]["lasry_lions_min"].as_f64().unwrap();
        assert_eq!(min < 0.0, rho > 0.0, "{report}");
    }
}

#[test]
fn passing_checks_exit_zero_and_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = lq(-0.5);
    c["checks"]["chain_rule"] = json!({"particles": 1024, "steps": 16});
    let cfg = write_config(tmp.path(), "c.json", &c);
    let out = tmp.path().join("reports");
    for name in ["chain_rule", "lq_validate"] {
        let o = run(&[
            "check",
            name,
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            code(&o),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&o.stdout)
        );
        let r = read_json(&out.join(format!("check_{name}.json")));
        assert_eq!(r["passed"], true);
    }
    let r = read_json(&out.join("check_lq_validate.json"));
    assert!(r["metrics"]["oracle_error"].as_f64().unwrap() < 1e-2);
}

#[test]
fn oracle_requires_linear_quadratic_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &trivial());
    let o = run(&[
        "oracle",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lq_mfg"));
}
