use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfg_cli::run::Metadata;

fn mfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg")).args(args).output().expect("binary runs")
}

fn problem(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../problems/{name}.json")).display().to_string()
}

fn solve_into(config: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["solve", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mfg(&args)
}

fn metadata(dir: &Path) -> Metadata {
    serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap()
}

fn values(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
}

fn trivial_run() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("trivial");
    let o = solve_into(&problem("trivial"), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (tmp, out)
}

#[test]
fn trivial_problem_is_certified_with_vanishing_residuals() {
    let (_tmp, out) = trivial_run();
    let meta = metadata(&out);
    assert!(meta.converged && meta.certified);
    let r = &meta.residuals[0];
    for v in [r.kkt_row1, r.fp_residual, r.mass_error, r.drift_residual, r.forward_fp_discrepancy.unwrap()] {
        assert!(v <= 1e-10, "{r:?}");
    }
    for f in ["m.csv", "u.csv", "w.csv", "lambdas.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("p.csv").exists() && !out.join("iterations.csv").exists());
}

#[test]
fn exponent_outside_the_range_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\n  \"problem\": \"p1\",\n  \"grid\": { \"nx\": 8, \"ny\": 8 },\n  \"hamiltonian\": { \"qprime\": 2.5 }\n}\n").unwrap();
    let o = solve_into(cfg.to_str().unwrap(), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("q > d") && err.contains("bad.json:4:"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_fields_and_missing_files_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("typo.json");
    fs::write(&cfg, "{\"problem\": \"p1\", \"grid\": {\"nx\": 8, \"ny\": 8}, \"hamiltonain\": {}}").unwrap();
    let o = solve_into(cfg.to_str().unwrap(), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hamiltonain"));
    let o = solve_into(tmp.path().join("absent.json").to_str().unwrap(), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_cap_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cap.json");
    fs::write(
        &cfg,
        r#"{"problem": "p2", "grid": {"nx": 8, "ny": 8}, "hamiltonian": {"qprime": 1.5},
            "coupling": {"kind": "zero"}, "kappa": 0.9}"#,
    )
    .unwrap();
    assert_eq!(solve_into(cfg.to_str().unwrap(), &tmp.path().join("out"), &[]).status.code(), Some(2));
}

#[test]
fn budget_exhaustion_exits_with_not_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("short.json");
    fs::write(
        &cfg,
        r#"{"problem": "p1", "grid": {"nx": 16, "ny": 16}, "hamiltonian": {"qprime": 1.5, "c": [0, 0.5, 0.25]},
            "coupling": {"kind": "local_primitive", "r": 1.0}, "solver": {"max_iters": 20}}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    assert_eq!(solve_into(cfg.to_str().unwrap(), &out, &[]).status.code(), Some(3));
    let meta = metadata(&out);
    assert!(!meta.converged && !meta.certified);
}

#[test]
fn congestion_run_writes_pressure_on_the_active_set() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("congestion");
    let o = solve_into(&problem("congestion"), &out, &["--emit-heatmaps"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let meta = metadata(&out);
    let r = &meta.residuals[0];
    assert!(r.active_nodes > 0);
    let (m, p) = (values(&out.join("m.csv")), values(&out.join("p.csv")));
    let p_max = p.iter().copied().fold(0.0, f64::max);
    assert!(p_max > 0.0);
    let active: Vec<usize> = (0..p.len()).filter(|&k| p[k] > 1e-6 * p_max).collect();
    assert_eq!(active.len(), r.active_nodes);
    assert!(active.iter().all(|&k| 1.05 - m[k] <= 1e-5));
    let header = b"P6\n33 33\n255\n";
    for f in ["m.ppm", "u.ppm", "p.ppm"] {
        let bytes = fs::read(out.join(f)).unwrap();
        assert_eq!(&bytes[..header.len()], header, "{f}");
        assert_eq!(bytes.len(), header.len() + 3 * 33 * 33);
    }
    assert_eq!(mfg(&["verify", out.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn verify_accepts_untouched_and_rejects_tampered_results() {
    let (_tmp, out) = trivial_run();
    let o = mfg(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    let path = out.join("m.csv");
    let original = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = original.lines().map(str::to_owned).collect();
    let (head, value) = lines[40].rsplit_once(',').unwrap();
    let v: f64 = value.parse().unwrap();
    lines[40] = format!("{head},{:.16e}", v + 1e-3);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = mfg(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mismatch"));

    fs::write(&path, original).unwrap();
    fs::remove_file(out.join("u.csv")).unwrap();
    let o = mfg(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("u.csv"));
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(solve_into(&problem("linear_varying"), dir, &["--seed", "5"]).status.code(), Some(0));
    }
    for f in ["m.csv", "u.csv", "w.csv", "lambdas.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (metadata(&a), metadata(&b));
    assert_eq!(ma.config.seed, 5);
    assert_eq!(ma.residuals, mb.residuals);
    assert_eq!(ma.uniqueness, mb.uniqueness);
}

#[test]
fn diagnostics_record_the_iteration_history() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lin");
    assert_eq!(solve_into(&problem("linear_varying"), &out, &["--diagnostics"]).status.code(), Some(0));
    let text = fs::read_to_string(out.join("iterations.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,objective,pde_residual,kkt_residual,drift_residual,step"));
    assert!(lines.count() > 1);

    let br = tmp.path().join("br");
    assert_eq!(solve_into(&problem("multipop_br"), &br, &["--diagnostics"]).status.code(), Some(0));
    let text = fs::read_to_string(br.join("iterations.csv")).unwrap();
    assert!(text.starts_with("outer,change_1,change_2,inner_iterations_1,inner_iterations_2\n"));
    for f in ["m_1.csv", "m_2.csv", "u_1.csv", "w_2.csv"] {
        assert!(br.join(f).exists(), "{f}");
    }
    assert_eq!(mfg(&["verify", br.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn constrained_potential_run_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("shared");
    assert_eq!(solve_into(&problem("multipop_potential_constrained"), &out, &[]).status.code(), Some(0));
    let meta = metadata(&out);
    let shared = meta.shared.as_ref().unwrap();
    assert!(shared.active_nodes > 0 && shared.complementarity <= 1e-6);
    assert!(out.join("p.csv").exists());
    assert_eq!(mfg(&["verify", out.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn selftest_reports_every_case() {
    let o = mfg(&["selftest", "--seed", "3", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["seed"], 3);
    let cases = report["cases"].as_array().unwrap();
    assert_eq!(cases.len(), mfg_core::fpcheck::case_names().len());
    assert!(cases.iter().all(|c| c["pass"] == true));
    let text = String::from_utf8(mfg(&["selftest"]).stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() == cases.len());
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_mfg"))
            .env("MFG_THREADS", threads)
            .args(["solve", "--config", &problem("congestion"), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(metadata(&out).threads.to_string(), threads);
        dirs.push(out);
    }
    for f in ["m.csv", "u.csv", "w.csv", "p.csv"] {
        assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
}
