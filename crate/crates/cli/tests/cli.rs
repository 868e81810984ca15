use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypoheat_cli::{load_config, parse_config, ConfigError};
use serde_json::{json, Value};

fn base_config(x0: [&str; 2]) -> Value {
    json!({
        "x0_expr": x0,
        "x1_expr": ["1", "0"],
        "base_point": [0.0, 0.0],
        "sim": {"n_paths": 20000, "dt": 0.002, "t_grid": [0.05, 0.1, 0.2, 0.3, 0.4], "bandwidth": "auto", "seed": 3},
        "fd": {"bounds": [-2.5, 2.5, -0.8, 0.8], "nx1": 201, "nx2": 201},
        "fit_window": [0.05, 0.4],
        "output_dir": "out"
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn hypoheat(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypoheat"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("HYPOHEAT_THREADS", n),
        None => cmd.env_remove("HYPOHEAT_THREADS"),
    };
    cmd.output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn kolmogorov_config_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1"]));
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.output_path(), dir.path().join("out"));
    assert_eq!(cfg.fit_times().len(), 5);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["kolmogorov.json", "quadratic.json"] {
        load_config(&root.join(name)).unwrap();
    }
}

#[test]
fn hypothesis_failures_are_named() {
    let text = base_config(["0", "x2"]).to_string();
    match parse_config(&text) {
        Err(e @ ConfigError::NotBracketGenerating { .. }) => assert!(e.to_string().contains("(b)")),
        other => panic!("{other:?}"),
    }
    let text = base_config(["0", "1 + x1"]).to_string();
    match parse_config(&text) {
        Err(e @ ConfigError::NotParallel { .. }) => assert!(e.to_string().contains("(a)")),
        other => panic!("{other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x2"]));
    let out = hypoheat(&["invariants", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hypothesis (b)"));
}

#[test]
fn malformed_json_reports_byte_offset() {
    let text = "{\"x0_expr\": [\"0\", \"x1\"],\n \"x1_expr\": [\"1\" \"0\"]}";
    match parse_config(text) {
        Err(ConfigError::Json { offset, line, column, .. }) => {
            assert_eq!((line, column), (2, 18));
            assert_eq!(offset, 42);
            assert_eq!(&text[offset..offset + 3], "\"0\"");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn other_config_errors() {
    let mut cfg = base_config(["0", "x1"]);
    cfg["x0_expr"][1] = json!("x1 +* 2");
    assert!(matches!(parse_config(&cfg.to_string()), Err(ConfigError::Expr { field: "x0_expr[1]", .. })));
    let mut cfg = base_config(["0", "x1"]);
    cfg["sim"]["t_grid"] = json!([0.3, 0.1]);
    assert!(matches!(parse_config(&cfg.to_string()), Err(ConfigError::Invalid(_))));
    let mut cfg = base_config(["0", "x1"]);
    cfg["colour"] = json!("blue");
    assert!(matches!(parse_config(&cfg.to_string()), Err(ConfigError::Json { .. })));
    let out = hypoheat(&["invariants", "--config", "/nonexistent/config.json"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = hypoheat(&["invariants"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn convolution_table_and_injected_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1"]));
    let out = hypoheat(&["verify", "convolutions", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("out/convolutions.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(out.stdout).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lhs_op,rhs_op,expected,computed,abs_error"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() < 1e-6);
    }

    let mut cfg = base_config(["0", "x1"]);
    cfg["expected_overrides"] = json!({"x1^2*d2|x1^2*d2": 0.2});
    let path = write_config(dir.path(), &cfg);
    let out = hypoheat(&["verify", "convolutions", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("x1^2*d2,x1^2*d2,2e-1,")));
}

#[test]
fn invariants_and_geometric_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1 + 0.5*x1^2"]));
    let p = path.to_str().unwrap();
    let inv = stdout_json(&hypoheat(&["invariants", "--config", p], None));
    assert_eq!(inv["K1"], json!(-4.0));
    assert_eq!(inv["K2"], json!(2.0));
    assert_eq!(inv["div"], json!(0.0));
    assert_eq!(inv["beta"], json!(0.0));
    for method in ["geometric", "coordinate", "duhamel-numeric"] {
        let out = hypoheat(&["coeff", "--method", method, "--config", p], None);
        assert_eq!(out.status.code(), Some(0));
        let c = stdout_json(&out)["coefficient"].as_f64().unwrap();
        assert!((c + 12.0 / 35.0).abs() < 1e-12, "{method}: {c}");
    }
}

#[test]
fn fd_coefficient_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(["0", "x1 + 0.5*x1^2"]);
    cfg["fd"]["nx1"] = json!(101);
    cfg["fd"]["nx2"] = json!(101);
    let path = write_config(dir.path(), &cfg);
    let rec = stdout_json(&hypoheat(&["coeff", "--method", "fd", "--config", path.to_str().unwrap()], None));
    let c = rec["coefficient"].as_f64().unwrap();
    assert!((c + 12.0 / 35.0).abs() < 0.04, "{c}");
    assert_eq!(rec["ratios"].as_array().unwrap().len(), 5);
}

#[test]
fn montecarlo_method_on_flat_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1"]));
    let rec = stdout_json(&hypoheat(&["coeff", "--method", "montecarlo", "--config", path.to_str().unwrap()], None));
    let (c, se) = (rec["coefficient"].as_f64().unwrap(), rec["stderr"].as_f64().unwrap());
    assert!(c.abs() < 3.0 * se, "{c} {se}");
    assert_eq!(rec["estimates"].as_array().unwrap().len(), 5);
    assert_eq!(rec["n_paths"], json!(20000));
}

#[test]
fn kernel_eval_matches_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1"]));
    let out = hypoheat(&["kernel", "eval", "--config", path.to_str().unwrap(), "--t", "0.5", "--x", "0,0", "--y", "0,0"], None);
    let v = stdout_json(&out)["value"].as_f64().unwrap();
    let want = 12f64.sqrt() / (2.0 * std::f64::consts::PI * 0.25);
    assert!((v - want).abs() < 1e-12 * want);
    let out = hypoheat(&["kernel", "eval", "--config", path.to_str().unwrap(), "--x", "0,0", "--y", "0,0"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = hypoheat(&["kernel", "eval", "--config", path.to_str().unwrap(), "--t", "1", "--x", "0", "--y", "0,0"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_sweeps_pass() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1 + 0.5*x1^2"]));
    let p = path.to_str().unwrap();
    for sub in ["lemma31", "identity"] {
        let out = hypoheat(&["verify", sub, "--config", p, "--samples", "50"], None);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert_eq!(stdout_json(&out)["pass"], json!(true));
    }
}

#[test]
fn simulate_writes_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config(["0", "x1"]));
    let p = path.to_str().unwrap();
    let out = hypoheat(&["simulate", "--config", p, "--n-paths", "50", "--t", "0.5", "--seed", "11"], None);
    assert_eq!(out.status.code(), Some(0));
    let rec = stdout_json(&out);
    assert_eq!(rec["seed"], json!(11));
    let csv = std::fs::read_to_string(dir.path().join("out/endpoints.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("path_index,t,x1,x2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    assert!(rows[7].starts_with("7,0.5,"));
    let again = hypoheat(&["simulate", "--config", p, "--n-paths", "50", "--t", "0.5", "--seed", "11"], Some("1"));
    assert_eq!(again.stdout, out.stdout);
    assert_eq!(std::fs::read_to_string(dir.path().join("out/endpoints.csv")).unwrap(), csv);
}

#[test]
fn blow_up_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(["x1^2", "x1 - 1"]);
    cfg["base_point"] = json!([1.0, 0.0]);
    cfg["sim"]["t_grid"] = json!([3.0]);
    cfg["sim"]["n_paths"] = json!(16);
    let path = write_config(dir.path(), &cfg);
    let out = hypoheat(&["simulate", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("path"));
}

#[test]
fn report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(["0", "x1"]);
    cfg["fd"]["nx1"] = json!(101);
    cfg["fd"]["nx2"] = json!(101);
    let path = write_config(dir.path(), &cfg);
    let p = path.to_str().unwrap();
    let first = hypoheat(&["report", "--config", p], Some("1"));
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stdout));
    let a = std::fs::read(dir.path().join("out/report.json")).unwrap();
    let second = hypoheat(&["report", "--config", p], Some("3"));
    assert_eq!(second.status.code(), Some(0));
    let b = std::fs::read(dir.path().join("out/report.json")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("out/convolutions.csv").exists());
    assert!(dir.path().join("out/timing.json").exists());

    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["all_pass"], json!(true));
    assert_eq!(report["tool"]["name"], json!("hypoheat"));
    assert_eq!(report["config"]["x0_expr"], json!(["0", "x1"]));
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() > 20);
    assert!(checks.iter().all(|c| c["pass"].is_boolean() && c["residual"].is_number()));
    for m in ["geometric", "coordinate", "duhamel_numeric", "fd"] {
        assert_eq!(report["coefficients"][m]["value"], json!(0.0), "{m}");
    }
    let mc = &report["coefficients"]["montecarlo"];
    assert!(mc["value"].as_f64().unwrap().abs() < 3.0 * mc["error"].as_f64().unwrap());

    let other = hypoheat(&["report", "--config", p, "--seed", "4"], None);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(std::fs::read(dir.path().join("out/report.json")).unwrap(), a);
}
