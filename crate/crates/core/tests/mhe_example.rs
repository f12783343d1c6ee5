use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_mhe::detect::*;
use robust_mhe::mhe::*;
use robust_mhe::model::*;
use robust_mhe::{SymMatrix, Vector};

fn scenario() -> Scenario {
    build_example_scenario()
}

fn cert() -> &'static DetectabilityCertificate {
    static CERT: OnceLock<DetectabilityCertificate> = OnceLock::new();
    CERT.get_or_init(|| example_certificate(&scenario(), &DetectOptions::default()).expect("grid certificate"))
}

fn x0() -> Vector {
    Vector::from_column_slice(&[2.0, -2.0])
}

/// Runs the estimator in closed loop for `steps` steps and returns the state
/// ready to estimate at `k = steps`.
fn window_state(design: &MheDesign, steps: usize, seed: u64) -> MheState {
    let sc = &design.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = MheState::for_design(design, &Vector::zeros(2));
    let mut x = x0();
    for _ in 0..steps {
        let out = estimate_with(&mut state, design).unwrap();
        let u = sc.controller.control(&out.theta.rows(0, 2).into_owned());
        let w = sc.boxes.w.sample(&mut rng);
        let step = plant_step(sc, &x, &w, &u).unwrap();
        state.record(u, step.y).unwrap();
        x = step.x_next;
    }
    state
}

fn robust_design(cert: &DetectabilityCertificate) -> MheDesign {
    MheDesign::robust(cert, &MheConfig::default(), &scenario()).unwrap()
}

fn random_point(p: &WindowProblem<'_>, rng: &mut ChaCha8Rng) -> Vector {
    let lo = p.lower_bounds();
    let hi = p.upper_bounds();
    let prior = p.prior_point();
    Vector::from_fn(p.dim(), |i, _| {
        if lo[i].is_finite() && hi[i].is_finite() {
            rng.random_range(lo[i].max(-1.0)..=hi[i].min(1.0))
        } else {
            prior[i] + rng.random_range(-1.0..1.0)
        }
    })
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

#[test]
fn cost_and_trust_gradients_match_finite_differences() {
    let design = robust_design(cert());
    let state = window_state(&design, 20, 3);
    let p = WindowProblem::new(&design, &state).unwrap();
    assert_eq!(p.nk, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let v = random_point(&p, &mut rng);
        let g = p.cost_gradient(&v);
        let fd = central_difference(|x| p.cost(x), &v);
        let err = (&g - &fd).amax() / g.amax().max(1.0);
        assert!(err <= 1e-5, "cost gradient relative error {err:e}");
        let g = p.trust_gradient(&v);
        let fd = central_difference(|x| p.trust(x), &v);
        let err = (&g - &fd).amax() / g.amax().max(1.0);
        assert!(err <= 1e-5, "trust gradient relative error {err:e}");
    }
}

#[test]
fn solved_windows_satisfy_the_trust_constraint_and_bounds() {
    let design = robust_design(cert());
    let mut state = window_state(&design, 25, 5);
    let p = WindowProblem::new(&design, &state).unwrap();
    let sol = p.solve(&p.prior_point()).unwrap();
    assert!(sol.converged);
    assert!(sol.lambda <= 1e-8, "Λ = {}", sol.lambda);
    assert!(sol.bound_violation <= 1e-9);
    assert!((p.cost(&p.pack(&sol.vars)) - sol.cost).abs() <= 1e-9 * sol.cost.max(1.0));
    for w in &sol.vars.w {
        assert!(design.scenario.boxes.w.contains(w, 1e-9));
    }
    let out = estimate_with(&mut state, &design).unwrap();
    let s = out.solution.unwrap();
    assert!(s.lambda <= 1e-8);
    assert!(!out.fallback);
}

#[test]
fn window_dynamics_are_consistent() {
    let design = robust_design(cert());
    let state = window_state(&design, 18, 9);
    let p = WindowProblem::new(&design, &state).unwrap();
    let sol = p.solve(&p.prior_point()).unwrap();
    let plant = &design.scenario.plant;
    let f = design.filter.as_ref().unwrap();
    let n = 2;
    for s in 0..p.nk {
        let th = &sol.thetas[s];
        let x = th.rows(0, n).into_owned();
        let psi = th.rows(n, th.len() - n).into_owned();
        let u = design.scenario.controller.control(&state_published(&state, p.nk, s));
        let x_next = plant.f(&x, &sol.vars.w[s], &sol.vars.d[s], &u);
        let g = plant.g(&x, &sol.vars.w[s]);
        let (psi_next, z) = robust_mhe::iqc::filter_step(f, &psi, &g, &sol.vars.d[s]).unwrap();
        let next = &sol.thetas[s + 1];
        assert!((next.rows(0, n) - x_next).amax() <= 1e-9);
        assert!((next.rows(n, next.len() - n) - psi_next).amax() <= 1e-9);
        assert!((&sol.z_hat[s] - z).amax() <= 1e-9);
    }
}

fn state_published(state: &MheState, nk: usize, s: usize) -> Vector {
    let hist: Vec<&Vector> = state.history().collect();
    hist[hist.len() - nk + s].rows(0, 2).into_owned()
}

fn scaled(c: &DetectabilityCertificate, factor: f64) -> DetectabilityCertificate {
    let sc = |m: &SymMatrix| SymMatrix::new(m.as_matrix() * factor);
    let mut out = c.clone();
    out.p = sc(&c.p);
    out.q = sc(&c.q);
    out.q0 = sc(&c.q0);
    out.r = sc(&c.r);
    out.r0 = sc(&c.r0);
    out.m_hat = sc(&c.m_hat);
    out.p0 = sc(&c.p0);
    out
}

#[test]
fn common_weight_scaling_leaves_the_minimizer_unchanged() {
    let design = robust_design(cert());
    let state = window_state(&design, 20, 21);
    let base = WindowProblem::new(&design, &state).unwrap();
    let sol = base.solve(&base.prior_point()).unwrap();
    for factor in [0.01, 7.5] {
        let c = scaled(cert(), factor);
        let d2 = robust_design(&c);
        let p2 = WindowProblem::new(&d2, &state).unwrap();
        let v = base.pack(&sol.vars);
        assert!((p2.cost(&v) - factor * sol.cost).abs() <= 1e-9 * factor * sol.cost);
        let s2 = p2.solve(&p2.prior_point()).unwrap();
        let v2 = p2.pack(&s2.vars);
        let diff = (&v - &v2).amax() / v.amax().max(1.0);
        assert!(diff <= 1e-5, "factor {factor}: minimizers differ by {diff:e}");
        assert!((s2.cost - factor * sol.cost).abs() <= 1e-6 * factor * sol.cost);
    }
}

#[test]
fn minimum_horizon_satisfies_the_bound() {
    let c = cert();
    let hb = min_horizon(c, 0.1).unwrap();
    assert!(hb.lambda_bar > 1.0);
    let rho2 = c.rho * c.rho;
    assert!(rho2.powi(hb.n_min as i32) * hb.lambda_bar < 1.0);
    if hb.n_min > 1 {
        assert!(rho2.powi(hb.n_min as i32 - 1) * hb.lambda_bar >= 1.0);
    }
}

#[test]
fn iss_constants_are_finite_at_and_above_the_minimum_horizon() {
    let c = cert();
    let hb = min_horizon(c, 0.1).unwrap();
    for n in [hb.n_min, hb.n_min + 3] {
        let k = iss_constants(c, 0.1, 500.0, n).unwrap();
        assert!(k.lambda > 0.0 && k.lambda < 1.0);
        for v in [k.big_c_x, k.big_c_w, k.err_c_x, k.err_c_w, k.c_x, k.c_0, k.c_w] {
            assert!(v.is_finite() && v > 0.0);
        }
    }
    if hb.n_min > 1 {
        assert!(iss_constants(c, 0.1, 500.0, hb.n_min - 1).is_err());
    }
}

#[test]
fn standard_estimator_fits_noiseless_nominal_data_exactly() {
    let sc = scenario();
    let nominal = sc.without_uncertainty();
    let nom_cert = verify_nominal(&sc, cert().rho, &DetectOptions::default()).unwrap();
    let design = MheDesign::standard(&nom_cert, &MheConfig::default(), &nominal).unwrap();
    let xhat0 = Vector::from_column_slice(&[0.5, -0.25]);
    let mut state = MheState::for_design(&design, &xhat0);
    let mut x = xhat0.clone();
    let w = Vector::zeros(1);
    for k in 0..20 {
        let out = estimate_with(&mut state, &design).unwrap();
        if let Some(s) = &out.solution {
            assert!(s.cost <= 1e-12, "k = {k}: cost {}", s.cost);
        }
        assert!((&out.theta - &x).amax() <= 1e-6, "k = {k}");
        let u = nominal.controller.control(&out.theta);
        let step = plant_step(&nominal, &x, &w, &u).unwrap();
        state.record(u, step.y).unwrap();
        x = step.x_next;
    }
}
