use std::fs;
use std::path::Path;
use std::process::Command;

use mvstop::cli::{export_vi, import_vi, read_field_csv, write_field_csv};
use mvstop::model::{BoundaryKind, Grid, ProblemSpec};
use mvstop::vi_limit::solve_vi;

const GBM_PROBLEM: &str = r#"
[problem]
drift = { kind = "gbm-style", c = 0.05 }
diffusion = { kind = "gbm-style", c = 0.7071067811865476 }
reward = { kind = "affine", a = 0.0, b = 1.0 }
gamma = 1.0
lambda = 0.1
horizon = 1.0

[grid]
x_min = 0.01
x_max = 2.0
n_x = 60
n_t = 100
"#;

fn mvstop(config: &Path, extra: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mvstop"))
        .arg(config)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn benchmark_report_has_the_threshold_and_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let body = format!(
        "{}\n[command.benchmark-gbm]\npoints = [0.25]\n[output]\ndirectory = {:?}\n",
        GBM_PROBLEM.replace("lambda = 0.1", "lambda = 0.0"),
        out
    );
    let cfg = write_config(tmp.path(), "bench.toml", &body);
    let (code, err) = mvstop(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let report = json(&out.join("benchmark_report.json"));
    assert!((report["threshold"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let v = report["points"][0]["value"].as_f64().unwrap();
    assert!((v - 0.256620).abs() < 5e-6, "{v}");
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "benchmark-gbm");
    assert!(manifest["elapsed_seconds"].as_f64().is_some());
}

#[test]
fn two_command_sections_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{GBM_PROBLEM}\n[command.solve-vi]\n[command.solve-hjb]\n");
    let cfg = write_config(tmp.path(), "two.toml", &body);
    let (code, err) = mvstop(&cfg, &["--output-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("two.toml"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unreadable_config_is_an_error() {
    let (code, err) = mvstop(Path::new("/nonexistent/run.toml"), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/run.toml"), "{err}");
}

#[test]
fn verify_flags_a_corrupted_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let sol_dir = tmp.path().join("sol");
    let body = format!("{GBM_PROBLEM}\n[command.solve-hjb]\n[output]\ndirectory = {sol_dir:?}\n");
    let (code, err) = mvstop(&write_config(tmp.path(), "solve.toml", &body), &[]);
    assert_eq!(code, 0, "{err}");
    for name in ["V.csv", "g.csv", "pi.csv"] {
        assert!(sol_dir.join(name).exists(), "{name}");
    }

    let verify = |dir: &Path, out: &Path| {
        let body = format!(
            "{GBM_PROBLEM}\n[command.verify]\ntarget = \"regularized\"\nsolution = {dir:?}\n[output]\ndirectory = {out:?}\n"
        );
        mvstop(&write_config(tmp.path(), "verify.toml", &body), &[]).0
    };
    assert_eq!(verify(&sol_dir, &tmp.path().join("ok")), 0);
    let report = json(&tmp.path().join("ok/certification_report.json"));
    assert_eq!(report["pass"], true);

    let grid = Grid::new(0.01, 2.0, 60, 100).unwrap();
    let mut pi = read_field_csv(&sol_dir.join("pi.csv"), &grid, 1.0).unwrap();
    pi.values.iter_mut().for_each(|p| *p *= 2.0);
    write_field_csv(&sol_dir.join("pi.csv"), &pi).unwrap();
    assert_eq!(verify(&sol_dir, &tmp.path().join("bad")), 2);
    let report = json(&tmp.path().join("bad/certification_report.json"));
    assert_eq!(report["pass"], false);
    assert!(report["failed"].as_u64().unwrap() > 0);
    assert!(!report["failures"].as_array().unwrap().is_empty());
    assert!(report["failures"][0]["x"].as_f64().is_some());
}

#[test]
fn simulate_is_deterministic_and_the_seed_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{GBM_PROBLEM}\n[command.simulate]\nx0 = 0.3\npolicy = \"constant\"\nintensity = 0.5\n[command.simulate.mc]\nn_paths = 2000\ndt_sim = 0.01\nmaster_seed = 5\n"
    );
    let cfg = write_config(tmp.path(), "sim.toml", &body);
    let run = |dir: &str, extra: &[&str]| {
        let out = tmp.path().join(dir);
        let mut args = vec!["--output-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(mvstop(&cfg, &args).0, 0);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let c = run("c", &["--seed", "6"]);
    let report = |d: &Path| fs::read(d.join("simulation_report.json")).unwrap();
    assert_eq!(report(&a), report(&b));
    assert_ne!(report(&a), report(&c));
    assert_eq!(json(&c.join("manifest.json"))["seed"], 6);
    let est = json(&a.join("simulation_report.json"));
    assert!(est["estimate"]["raw"]["first_moment"]["std_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_keys_fail_with_the_key_name() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{GBM_PROBLEM}\n[command.simulate]\nx0 = 0.3\npolicy = \"constant\"\nintensty = 0.5\n");
    let (code, err) = mvstop(&write_config(tmp.path(), "typo.toml", &body), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("intensty"), "{err}");
}

#[test]
fn vi_export_round_trip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.0, 2.0);
    let grid = Grid::new(0.01, 2.0, 80, 200).unwrap().with_boundary(BoundaryKind::ValueClampedToF);
    let sol = solve_vi(&spec, &grid).unwrap();
    let files = export_vi(&sol, tmp.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("boundary.csv")));
    let back = import_vi(tmp.path(), &spec, &grid).unwrap();
    for (a, b) in [(&sol.v, &back.v), (&sol.g, &back.g), (&sol.h, &back.h), (&sol.residual, &back.residual)] {
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(sol.stop_mask, back.stop_mask);
    assert_eq!(sol.boundary, back.boundary);
    let header = fs::read_to_string(tmp.path().join("boundary.csv")).unwrap();
    assert!(header.starts_with("t,c\n"));
}
