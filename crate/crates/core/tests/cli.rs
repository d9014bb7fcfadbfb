use std::fs;
use std::path::PathBuf;

use stripe_impurity::cli::{format_float, main_with, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
use stripe_impurity::defectsolve::DefectSolution;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stripe-impurity-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("stripe-impurity").chain(args.iter().copied()))
}

fn manifest(dir: &PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn empty_config_lists_required_keys() {
    let dir = scratch("empty");
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, "{}").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(run(&["response", "--mu", "0.1", "--k", "1"]), EXIT_CONFIG);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = scratch("unknown");
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, r#"{"command": "stripes", "colour": "blue"}"#).unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(run(&["stripes", "--mu", "0.1", "--k", "1", "--set", "n_sigma=3"]), EXIT_CONFIG);
}

#[test]
fn response_csv_is_deterministic_and_flags_override_file() {
    let dir = scratch("response");
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"command": "response", "parameters": {"mu": 0.2, "k": 1.0, "impurity": "gaussian", "n_phases": 16}}"#,
    )
    .unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        let code = run(&["--config", cfg.to_str().unwrap(), "--mu", "0.1", "--out", d.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
    }
    let body = fs::read_to_string(a.join("response.csv")).unwrap();
    assert_eq!(body, fs::read_to_string(b.join("response.csv")).unwrap());
    assert!(body.starts_with("phi0,Mk,Mphi\n"));
    assert_eq!(body.lines().count(), 17);
    let m = manifest(&a);
    assert_eq!(m["config"]["parameters"]["mu"], 0.1);
    assert_eq!(m["config"]["parameters"]["n_phases"], 16);
    assert_eq!(m["status"], "ok");
    assert!(m["tolerances"]["response_tail_tol"].is_number());
}

#[test]
fn defect_solution_round_trips_bit_exactly() {
    let dir = scratch("solve");
    let args = [
        "solve", "--mu", "0.1", "--k", "1", "--impurity", "gaussian", "--eps", "1e-3", "--phi0", "1.1", "--set",
        "periods=8", "--out",
    ];
    let mut v: Vec<&str> = args.to_vec();
    let d = dir.to_str().unwrap().to_string();
    v.push(&d);
    assert_eq!(run(&v), EXIT_OK);
    let text = fs::read_to_string(dir.join("defect.json")).unwrap();
    let sol: DefectSolution = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&sol).unwrap() + "\n", text);
    let csv = fs::read_to_string(dir.join("defect.csv")).unwrap();
    assert!(csv.starts_with("x,u,w\n"));
    let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(first, vec![sol.x[0], sol.u[0], sol.w[0]]);
}

#[test]
fn numerical_failure_writes_diagnostics() {
    let dir = scratch("fail");
    let code = run(&["stripes", "--mu", "0.1", "--k", "1.35", "--out", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_NUMERICAL);
    let m = manifest(&dir);
    assert_eq!(m["status"], "numerical_failure");
    assert!(m["error"]["message"].as_str().unwrap().contains("no nontrivial stripe"));
}

#[test]
fn fredholm_scan_table() {
    let dir = scratch("fredholm");
    let code = run(&[
        "fredholm",
        "--set",
        r#"operator={"kind":"difference","ell":1,"i":0}"#,
        "--set",
        "n=64",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let body = fs::read_to_string(dir.join("scan.csv")).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("gamma,p,ell,i,dim_ker,dim_coker,gap"));
    let dims: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[4].to_string(), f[5].to_string())
        })
        .collect();
    assert_eq!(dims, [("1".into(), "0".into()), ("0".into(), "1".into())]);
}

#[test]
fn floats_keep_seventeen_digits() {
    for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
        let s = format_float(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
        let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
        assert_eq!(mantissa.len(), 17, "{s}");
    }
}
