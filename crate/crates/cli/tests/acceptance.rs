//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits 0 as
//! long as every check could be evaluated.
//!
//! Run with `cargo test -p robust-mhe-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_mhe::detect::{
    certificate_hash, example_certificate, validate_certificate, verify_nominal, write_certificate, DetectOptions,
    DetectabilityCertificate,
};
use robust_mhe::iqc::{build_static_polytopic_template, check_pointwise_iqc_empirical};
use robust_mhe::mhe::{estimate_with, iss_constants, min_horizon, MheConfig, MheDesign, MheError, MheState, WindowProblem};
use robust_mhe::model::{build_example_scenario, plant_step, LinearUncertainty};
use robust_mhe::numkit::{generalized_max_eig, psd_factor};
use robust_mhe::sim::{check_bounds, compare, Comparison, SimError};
use robust_mhe::{Matrix, Scenario, SymMatrix, Vector};

const MARGIN_MIN: f64 = 1e-6;
const VERIFY_BUDGET: Duration = Duration::from_secs(60);
const HORIZON_CORRIDOR: (usize, usize) = (4, 40);
const HORIZON_REFERENCE: usize = 12;
const CLOSED_LOOP_STEPS: usize = 100;
const CLOSED_LOOP_SEEDS: u64 = 10;
const CLOSED_LOOP_BUDGET: Duration = Duration::from_secs(300);
const DIVERGENCE_FACTOR: f64 = 10.0;
const TAIL_STATE_MAX: f64 = 0.5;
const EPSILON: f64 = 0.1;
const XI: f64 = 500.0;
const BOUND_TOL: f64 = 1e-9;
const IQC_TOL: f64 = 1e-9;
const IQC_TRAJECTORIES: usize = 100;
const IQC_LENGTH: usize = 100;
const DISSIPATION_TOL: f64 = 1e-7;
const DISSIPATION_PAIRS: usize = 1000;
const DISSIPATION_LENGTH: usize = 50;
const LAMBDA_TOL: f64 = 1e-8;
const GEN_EIG_TOL: f64 = 1e-8;
const GRADIENT_TOL: f64 = 1e-5;
const FACTOR_TOL: f64 = 1e-10;

fn line(id: usize, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("criterion {id}: {} | {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-mhe"))
}

fn x0() -> Vector {
    Vector::from_column_slice(&[2.0, -2.0])
}

fn criterion_1(dir: &Path) -> bool {
    let start = Instant::now();
    let combined = bin()
        .current_dir(dir)
        .args([
            "verify", "--scenario", "example1", "--rho2", "0.86", "--zf-order", "2", "--beta", "0.25", "--alpha", "0",
            "--with-static", "-o", "combined.json",
        ])
        .output()
        .expect("binary runs");
    let combined_time = start.elapsed();
    let margin = String::from_utf8_lossy(&combined.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("margin = ").and_then(|v| v.parse::<f64>().ok()));
    let start = Instant::now();
    let static_only = bin()
        .current_dir(dir)
        .args(["verify", "--scenario", "example1", "--rho2", "0.86", "--static-only", "-o", "static.json"])
        .output()
        .expect("binary runs");
    let static_time = start.elapsed();
    let combined_ok = combined.status.code() == Some(0) && margin.is_some_and(|m| m > MARGIN_MIN);
    let static_ok = static_only.status.code() == Some(2);
    let timely = combined_time <= VERIFY_BUDGET && static_time <= VERIFY_BUDGET;
    let combined_msg = match combined.status.code() {
        Some(0) => format!("exit 0, margin {:e}", margin.unwrap_or(f64::NAN)),
        code => format!(
            "exit {code:?} ({})",
            String::from_utf8_lossy(&combined.stderr).trim().trim_start_matches("error: ")
        ),
    };
    line(
        1,
        combined_ok && static_ok && timely,
        format!(
            "rho2 0.86 combined ZF(2)+static: {combined_msg} in {:.1} s; static only: exit {:?} in {:.1} s",
            combined_time.as_secs_f64(),
            static_only.status.code(),
            static_time.as_secs_f64()
        ),
    )
}

fn criterion_2(cert: &DetectabilityCertificate) -> (bool, Option<usize>) {
    match min_horizon(cert, EPSILON) {
        Ok(hb) => {
            let rho2 = cert.rho * cert.rho;
            let contraction = rho2.powi(hb.n_min as i32) * hb.lambda_bar;
            let in_corridor = (HORIZON_CORRIDOR.0..=HORIZON_CORRIDOR.1).contains(&hb.n_min);
            let pass = hb.lambda_bar > 1.0 && contraction < 1.0 && in_corridor;
            line(
                2,
                pass,
                format!(
                    "rho2 {rho2}: lambda_bar {:.6}, N_min {} (corridor [{}, {}], reference {HORIZON_REFERENCE}), rho^(2 N_min) lambda_bar = {contraction:.6}",
                    hb.lambda_bar, hb.n_min, HORIZON_CORRIDOR.0, HORIZON_CORRIDOR.1
                ),
            );
            (pass, Some(hb.n_min))
        }
        Err(e) => (line(2, false, format!("no horizon bound: {e}")), None),
    }
}

struct ClosedLoop {
    result: Result<Comparison, SimError>,
    horizon: usize,
    elapsed: Duration,
}

fn closed_loop(cert: &DetectabilityCertificate, scenario: &Scenario, n_min: usize) -> Result<ClosedLoop, String> {
    let horizon = n_min.max(15);
    let cfg = MheConfig {
        horizon,
        epsilon: EPSILON,
        xi: XI,
        ..Default::default()
    };
    let robust = MheDesign::robust(cert, &cfg, scenario).map_err(|e| e.to_string())?;
    let nominal = verify_nominal(scenario, cert.rho, &DetectOptions::default()).map_err(|e| e.to_string())?;
    let standard = MheDesign::standard(&nominal, &cfg, scenario).map_err(|e| e.to_string())?;
    let rh = certificate_hash(cert).map_err(|e| e.to_string())?;
    let sh = certificate_hash(&nominal).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..CLOSED_LOOP_SEEDS).collect();
    let start = Instant::now();
    let result = compare((&robust, &rh), (&standard, &sh), CLOSED_LOOP_STEPS, &seeds, &x0(), &Vector::zeros(2));
    Ok(ClosedLoop {
        result,
        horizon,
        elapsed: start.elapsed(),
    })
}

fn criterion_3(run: &ClosedLoop) -> bool {
    let out = match &run.result {
        Ok(o) => o,
        Err(e) => return line(3, false, format!("closed loop aborted: {e}")),
    };
    let limit = DIVERGENCE_FACTOR * x0().norm();
    let worst_state = out.first.iter().map(|t| t.max_state_norm()).fold(0.0, f64::max);
    let diverged = out.first.iter().filter(|t| t.max_state_norm() > limit).count();
    let s = &out.summary;
    let a = diverged == 0;
    let b = s.median_err_proposed < s.median_err_standard;
    let c = s.median_state_proposed <= TAIL_STATE_MAX;
    let timely = run.elapsed <= CLOSED_LOOP_BUDGET;
    let mark = |ok: bool| if ok { "ok" } else { "fail" };
    line(
        3,
        a && b && c && timely,
        format!(
            "N {}, {} seeds in {:.1} s; (a) {}: max |x| {worst_state:.3} vs {limit:.3}, {diverged} seeds over; (b) {}: median tail error {:.4} vs standard {:.4}; (c) {}: median tail |x| {:.4} (standard {:.4})",
            run.horizon,
            CLOSED_LOOP_SEEDS,
            run.elapsed.as_secs_f64(),
            mark(a),
            mark(b),
            s.median_err_proposed,
            s.median_err_standard,
            mark(c),
            s.median_state_proposed,
            s.median_state_standard
        ),
    )
}

fn criterion_4(cert: &DetectabilityCertificate, run: &ClosedLoop) -> bool {
    let out = match &run.result {
        Ok(o) => o,
        Err(e) => return line(4, false, format!("no traces: {e}")),
    };
    let consts = match iss_constants(cert, EPSILON, XI, run.horizon) {
        Ok(c) => c,
        Err(e) => return line(4, false, format!("no ISS constants: {e}")),
    };
    let reports: Vec<_> = out.first.iter().map(|t| check_bounds(t, &consts)).collect();
    let state = reports.iter().map(|r| r.max_state_ratio).fold(0.0, f64::max);
    let error = reports.iter().map(|r| r.max_error_ratio).fold(0.0, f64::max);
    line(
        4,
        reports.iter().all(|r| r.passed(BOUND_TOL)),
        format!(
            "{} traces; lambda {:.7}, C_x {:.4}, C_w {:.4}; worst state ratio {state:.3e}, worst error ratio {error:.3e}",
            reports.len(),
            consts.lambda,
            consts.big_c_x,
            consts.big_c_w
        ),
    )
}

fn criterion_5(cert: &DetectabilityCertificate, scenario: &Scenario) -> bool {
    let valid = check_pointwise_iqc_empirical(
        &cert.multiplier,
        scenario.uncertainty.as_ref(),
        IQC_TRAJECTORIES,
        IQC_LENGTH,
        5,
    );
    let identity = LinearUncertainty {
        gain: Matrix::identity(1, 1),
    };
    let sector = build_static_polytopic_template(0.0, 0.25, 1)
        .and_then(|t| t.instantiate(&[0.0, 0.125, -1.0], cert.rho))
        .expect("sector multiplier");
    let probe = check_pointwise_iqc_empirical(&sector, &identity, IQC_TRAJECTORIES, IQC_LENGTH, 5);
    let caught = !probe.passed(IQC_TOL);
    line(
        5,
        valid.passed(IQC_TOL) && valid.steps >= 10_000 && caught,
        format!(
            "certificate multiplier over {} steps: min {:.3e}; identity vs sector [0, 0.25]: min {:.3e} ({})",
            valid.steps,
            valid.min_value,
            probe.min_value,
            if caught { "caught" } else { "missed" }
        ),
    )
}

fn criterion_6(cert: &DetectabilityCertificate, scenario: &Scenario) -> bool {
    match validate_certificate(cert, scenario, DISSIPATION_PAIRS, DISSIPATION_LENGTH, 11) {
        Ok(r) => line(
            6,
            r.passed(DISSIPATION_TOL),
            format!(
                "{} pairs x {}: {} steps checked, {} pairs left the region, worst violation {:.3e}",
                r.pairs, DISSIPATION_LENGTH, r.steps_checked, r.steps_outside_region, r.worst_violation
            ),
        ),
        Err(e) => line(6, false, e.to_string()),
    }
}

fn criterion_7(run: &ClosedLoop) -> bool {
    match &run.result {
        Ok(out) => {
            let steps: Vec<_> = out.first.iter().flat_map(|t| t.steps.iter()).collect();
            let worst = steps.iter().map(|s| s.lambda).fold(f64::NEG_INFINITY, f64::max);
            let fallbacks = steps.iter().filter(|s| s.fallback).count();
            line(
                7,
                worst <= LAMBDA_TOL,
                format!(
                    "{} robust steps, 0 infeasible windows, max constraint value {worst:.3e}, {fallbacks} iteration-cap fallbacks",
                    steps.len()
                ),
            )
        }
        Err(SimError::Estimator {
            k,
            source: MheError::InfeasibleWindow { lambda },
            ..
        }) => line(7, false, format!("infeasible window at k = {k} (constraint value {lambda:e})")),
        Err(e) => line(7, false, format!("closed loop aborted: {e}")),
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let g = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + Matrix::identity(n, n) * 0.1
}

/// Largest real part of the eigenvalues of `b⁻¹a` from a Schur decomposition.
fn brute_force_gen_eig(a: &Matrix, b: &Matrix) -> f64 {
    let m = b.clone().try_inverse().expect("invertible") * a;
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_8(cert: &DetectabilityCertificate, scenario: &Scenario) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut eig_err: f64 = 0.0;
    for _ in 0..100 {
        let a = random_spd(&mut rng, 6);
        let b = random_spd(&mut rng, 6);
        let got = generalized_max_eig(&SymMatrix::new(a.clone()), &SymMatrix::new(b.clone())).expect("SPD pencil");
        let want = brute_force_gen_eig(&a, &b);
        eig_err = eig_err.max((got - want).abs() / want.abs().max(1.0));
    }

    let mut factor_err: f64 = 0.0;
    for i in 0..100 {
        let n = 2 + i % 7;
        let rank = 1 + i % n;
        let g = Matrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        let a = &g * g.transpose();
        let l = psd_factor(&SymMatrix::new(a.clone()), 1e-12).expect("PSD input");
        factor_err = factor_err.max((l.transpose() * &l - &a).amax());
    }

    let grad_err = match gradient_check(cert, scenario, &mut rng) {
        Ok(e) => e,
        Err(e) => return line(8, false, format!("gradient check failed to run: {e}")),
    };
    line(
        8,
        eig_err <= GEN_EIG_TOL && grad_err <= GRADIENT_TOL && factor_err <= FACTOR_TOL,
        format!(
            "generalized eigenvalue error {eig_err:.2e} (100 pairs, 6x6); cost and constraint gradient relative error {grad_err:.2e} (100 points); factor reconstruction error {factor_err:.2e}"
        ),
    )
}

fn central_difference(f: impl Fn(&Vector) -> f64, v: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i, _| {
        let h = 1e-6 * (1.0 + v[i].abs());
        let mut a = v.clone();
        let mut b = v.clone();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

fn gradient_check(cert: &DetectabilityCertificate, scenario: &Scenario, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let design = MheDesign::robust(cert, &MheConfig::default(), scenario).map_err(|e| e.to_string())?;
    let mut state = MheState::for_design(&design, &Vector::zeros(2));
    let mut x = x0();
    for _ in 0..20 {
        let out = estimate_with(&mut state, &design).map_err(|e| e.to_string())?;
        let u = scenario.controller.control(&out.theta.rows(0, 2).into_owned());
        let w = scenario.boxes.w.sample(rng);
        let step = plant_step(scenario, &x, &w, &u).map_err(|e| e.to_string())?;
        state.record(u, step.y).map_err(|e| e.to_string())?;
        x = step.x_next;
    }
    let p = WindowProblem::new(&design, &state).map_err(|e| e.to_string())?;
    let (lo, hi, prior) = (p.lower_bounds().clone(), p.upper_bounds().clone(), p.prior_point());
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v = Vector::from_fn(p.dim(), |i, _| {
            if lo[i].is_finite() && hi[i].is_finite() {
                rng.random_range(lo[i].max(-1.0)..=hi[i].min(1.0))
            } else {
                prior[i] + rng.random_range(-1.0..1.0)
            }
        });
        for (g, fd) in [
            (p.cost_gradient(&v), central_difference(|x| p.cost(x), &v)),
            (p.trust_gradient(&v), central_difference(|x| p.trust(x), &v)),
        ] {
            worst = worst.max((&g - &fd).amax() / g.amax().max(1.0));
        }
    }
    Ok(worst)
}

fn criterion_9(dir: &Path, cert: &DetectabilityCertificate) -> bool {
    let path = dir.join("cert.json");
    if let Err(e) = write_certificate(cert, &path) {
        return line(9, false, format!("certificate not written: {e}"));
    }
    let run = |csv: &str| {
        bin()
            .current_dir(dir)
            .args(["simulate", "--cert", "cert.json", "--steps", "40", "--seed", "3", "--csv", csv])
            .output()
            .expect("binary runs")
    };
    let (a, b) = (run("first.csv"), run("second.csv"));
    if a.status.code() != Some(0) || b.status.code() != Some(0) {
        return line(
            9,
            false,
            format!("simulate failed: {}", String::from_utf8_lossy(&a.stderr).trim()),
        );
    }
    let first = std::fs::read(dir.join("first.csv")).unwrap_or_default();
    let second = std::fs::read(dir.join("second.csv")).unwrap_or_default();
    line(
        9,
        !first.is_empty() && first == second,
        format!("two simulate runs (seed 3, 40 steps): {} bytes each, identical = {}", first.len(), first == second),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let scenario = build_example_scenario();
    let mut passed = Vec::new();
    passed.push(criterion_1(dir.path()));

    let cert = match example_certificate(&scenario, &DetectOptions::default()) {
        Ok(c) => c,
        Err(e) => {
            for id in 2..=9 {
                passed.push(line(id, false, format!("no certificate on the rho2 grid: {e}")));
            }
            summary(&passed);
            return;
        }
    };
    let (ok, n_min) = criterion_2(&cert);
    passed.push(ok);
    let run = n_min.map(|n| closed_loop(&cert, &scenario, n));
    match &run {
        Some(Ok(r)) => {
            passed.push(criterion_3(r));
            passed.push(criterion_4(&cert, r));
        }
        Some(Err(e)) => {
            passed.push(line(3, false, format!("estimators not built: {e}")));
            passed.push(line(4, false, "no traces"));
        }
        None => {
            passed.push(line(3, false, "no horizon"));
            passed.push(line(4, false, "no horizon"));
        }
    }
    passed.push(criterion_5(&cert, &scenario));
    passed.push(criterion_6(&cert, &scenario));
    match &run {
        Some(Ok(r)) => passed.push(criterion_7(r)),
        _ => passed.push(line(7, false, "no closed-loop runs")),
    }
    passed.push(criterion_8(&cert, &scenario));
    passed.push(criterion_9(dir.path(), &cert));
    summary(&passed);
}

fn summary(passed: &[bool]) {
    let n = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n} of {} criteria pass", passed.len());
}
