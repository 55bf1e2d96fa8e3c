use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use cone_pencil::cli::{self, parse_problem_file, ProblemFile};
use cone_pencil::pencil::builtin_problem;
use serde_json::Value;

fn example(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("cone-pencil").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn report(args: &[&str]) -> Value {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{err}");
    serde_json::from_str(&out).unwrap()
}

fn pair(v: &Value) -> (f64, f64) {
    (v[0].as_f64().unwrap(), v[1].as_f64().unwrap())
}

#[test]
fn periodic_eigs_report() {
    let r = report(&["eigs", "--problem", &example("periodic.json"), "--rect", "-0.5", "4.5", "-4.5", "0.5", "--nphi", "64"]);
    let eigs = r["results"]["eigenvalues"].as_array().unwrap();
    assert_eq!(eigs.len(), 5);
    for (k, e) in eigs.iter().enumerate() {
        let (re, im) = pair(&e["lambda"]);
        assert!(re.abs() <= 1e-8 && (im - (k as f64 - 4.0)).abs() <= 1e-8);
    }
    assert_eq!(r["verb"], "eigs");
    assert_eq!(r["seed"], 0);
    assert_eq!(r["discretization"]["n_phi"], 64);
    assert_eq!(r["digest"].as_str().unwrap().len(), 64);
}

#[test]
fn ex21_verdict_is_fredholm() {
    let r = report(&["verdict", "--problem", &example("ex21.json"), "--a", "1", "--l", "0"]);
    assert_eq!(r["results"]["status"], "fredholm");
    assert_eq!(r["results"]["line_im"], 0.0);
}

#[test]
fn periodic_strip_record() {
    let r = report(&["strip-check", "--problem", &example("periodic.json"), "--h2", "-1.5", "--h1", "-0.5"]);
    let recs = r["results"]["records"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    let (re, im) = pair(&recs[0]["lambda"]);
    assert!(re.abs() <= 1e-8 && (im + 1.0).abs() <= 1e-8);
    assert_eq!(recs[0]["ranks"], serde_json::json!([1, 1]));
}

#[test]
fn domain_errors_exit_two() {
    let (code, _, err) = run(&["jordan", "--problem", &example("periodic.json"), "--lambda", "0", "0.5"]);
    assert_eq!(code, 2);
    assert!(err.contains("not an eigenvalue"));
    let (code, _, err) = run(&["strip-check", "--problem", &example("periodic.json"), "--h2", "-1", "--h1", "-0.5"]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = run(&["exponent-fit", "--problem", &example("sector_ex21.json"), "--window", "0.1", "0.11"]);
    assert_eq!(code, 2);
}

#[test]
fn wrong_file_kind_is_a_usage_error() {
    let (code, _, _) = run(&["sector-solve", "--problem", &example("ex21.json")]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["eigs", "--problem", &example("sector_ex21.json"), "--rect", "0", "1", "0", "1"]);
    assert_eq!(code, 1);
}

#[test]
fn shipped_ex21_equals_builtin() {
    let text = std::fs::read_to_string(example("ex21.json")).unwrap();
    let ProblemFile::Pencil(p) = parse_problem_file(&text).unwrap() else { panic!("not a pencil file") };
    let params: BTreeMap<String, f64> =
        [("d", PI / 2.0), ("alpha1", 0.5), ("alpha2", 0.5)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    assert_eq!(p, builtin_problem("ex21_sector", &params).unwrap());
}

#[test]
fn every_shipped_example_parses() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            parse_problem_file(&std::fs::read_to_string(&path).unwrap()).unwrap();
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn report_file_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let csv = dir.path().join("rings.csv");
    let (code, stdout, _) = run(&[
        "sector-solve",
        "--problem",
        &example("sector_smooth.json"),
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r["results"]["solve"]["relative_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(r["discretization"]["n_r"], 32);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "r,l2_ring_norm");
    assert_eq!(lines.len(), 34);
}

#[test]
fn digest_tracks_flags() {
    let a = report(&["verdict", "--problem", &example("ex21.json"), "--a", "1", "--l", "0"]);
    let b = report(&["verdict", "--problem", &example("ex21.json"), "--a", "0.5", "--l", "0"]);
    assert_ne!(a["digest"], b["digest"]);
}
