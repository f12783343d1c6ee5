use std::path::Path;
use std::process::{Command, Output};

use robust_mhe::detect::{certificate_to_json, read_certificate};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-mhe"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scalar_cert(dir: &Path) {
    let o = run(dir, &["verify", "--scenario", "scalar", "--rho2", "0.8", "-o", "cert.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_writes_a_certificate_that_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    scalar_cert(dir.path());
    let out = stdout(&run(dir.path(), &["verify", "--scenario", "scalar", "--rho2", "0.8", "-o", "again.json"]));
    assert!(out.contains("margin = "));
    let text = std::fs::read_to_string(dir.path().join("cert.json")).unwrap();
    let cert = read_certificate(&dir.path().join("cert.json")).unwrap();
    assert_eq!(certificate_to_json(&cert).unwrap(), text);
    assert_eq!(std::fs::read(dir.path().join("again.json")).unwrap(), text.as_bytes());
}

#[test]
fn horizon_prints_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    scalar_cert(dir.path());
    let o = run(dir.path(), &["horizon", "--cert", "cert.json", "--eps", "0.1"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let field = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or_else(|| panic!("missing {key} in {text}"))
    };
    assert!(field("N_min = ") >= 1.0);
    assert!(field("lambda_bar = ") > 1.0);
}

#[test]
fn infeasible_certificates_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--scenario", "example1", "--rho2", "0.86", "--static-only"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
    assert!(!dir.path().join("certificate.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["verify", "--scenario", "nowhere", "--rho2", "0.8"],
        &["verify", "--scenario", "scalar"],
        &["verify", "--scenario", "scalar", "--rho2", "1.5"],
        &["horizon", "--cert", "missing.json"],
        &["simulate"],
        &["plot", "--csv", "missing.csv", "--svg", "out.svg"],
    ] {
        assert_eq!(code(&run(dir.path(), args)), 1, "{args:?}");
    }
    std::fs::write(dir.path().join("bad.toml"), "[mhe]\nhorizon = 0\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["--config", "bad.toml", "horizon"])), 1);
    let o = bin().current_dir(dir.path()).args(["horizon", "--cert", "x"]).env("THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn simulate_is_byte_reproducible_and_the_svg_comes_from_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scalar_cert(d);
    let args = |csv: &'static str, svg: &'static str| {
        vec!["simulate", "--cert", "cert.json", "--steps", "40", "--seed", "7", "--csv", csv, "--svg", svg, "--log-scale"]
    };
    assert_eq!(code(&run(d, &args("a.csv", "a.svg"))), 0);
    assert_eq!(code(&run(d, &args("b.csv", "b.svg"))), 0);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 41);
    let o = bin().current_dir(d).args(args("c.csv", "c.svg")).env("THREADS", "1").output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(a, std::fs::read(d.join("c.csv")).unwrap());

    assert_eq!(code(&run(d, &["plot", "--csv", "a.csv", "--svg", "re.svg", "--log-scale"])), 0);
    assert_eq!(std::fs::read(d.join("a.svg")).unwrap(), std::fs::read(d.join("re.svg")).unwrap());

    let o = run(d, &["simulate", "--cert", "cert.json", "--steps", "40", "--seed", "8", "--csv", "other.csv"]);
    assert_eq!(code(&o), 0);
    assert_ne!(a, std::fs::read(d.join("other.csv")).unwrap());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scalar_cert(d);
    std::fs::write(
        d.join("run.toml"),
        "[certificate]\npath = \"cert.json\"\n[mhe]\nsteps = 12\nhorizon = 4\nseed = 3\n[output]\ncsv = \"cfg.csv\"\n",
    )
    .unwrap();
    let o = run(d, &["--config", "run.toml", "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("N = 4, steps = 12, seed = 3"));
    assert_eq!(std::fs::read_to_string(d.join("cfg.csv")).unwrap().lines().count(), 13);
    let o = run(d, &["--config", "run.toml", "simulate", "--steps", "5", "--horizon", "auto", "--csv", "flag.csv"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("steps = 5"));
    assert!(!stdout(&o).contains("N = 4,"));
    assert_eq!(std::fs::read_to_string(d.join("flag.csv")).unwrap().lines().count(), 6);
}

#[test]
fn compare_writes_one_row_per_seed_and_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scalar_cert(d);
    let o = run(d, &["compare", "--cert", "cert.json", "--steps", "30", "--seeds", "3", "-o", "s.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed,est,mean_err_tail,mean_state_tail");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines.iter().filter(|l| l.contains(",proposed,")).count(), 3);
    let o = run(d, &["compare", "--cert", "cert.json", "--steps", "30", "--seeds", "3", "-o", "t.csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(text, std::fs::read_to_string(d.join("t.csv")).unwrap());
}

#[test]
fn iqc_check_reports_a_minimum() {
    let dir = tempfile::tempdir().unwrap();
    scalar_cert(dir.path());
    let o = run(dir.path(), &["iqc-check", "--cert", "cert.json", "--trajectories", "5", "--length", "20"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("min_iqc_value = "));
}
