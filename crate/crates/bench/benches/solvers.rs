use criterion::{criterion_group, criterion_main, Criterion};
use robust_mhe::detect::{example_certificate, example_template, verify_detectability, DetectOptions};
use robust_mhe::mhe::{estimate_with, MheConfig, MheDesign, MheState, WindowProblem};
use robust_mhe::model::{build_example_scenario, plant_step};
use robust_mhe::Vector;

fn sdp(c: &mut Criterion) {
    let scenario = build_example_scenario();
    let opts = DetectOptions::default();
    let mut group = c.benchmark_group("sdp");
    group.sample_size(10);
    group.bench_function("example_zf2_static_rho2_0.95", |b| {
        let rho = 0.95f64.sqrt();
        let t = example_template(2, 0.0, 0.25, 1, rho).unwrap();
        b.iter(|| verify_detectability(&scenario, &t, rho, &opts))
    });
    group.finish();
}

/// Estimator state after `steps` noise-free closed-loop steps.
fn warmed_state(design: &MheDesign, steps: usize) -> MheState {
    let sc = &design.scenario;
    let mut state = MheState::for_design(design, &sc.xhat0);
    let mut x = sc.x0.clone();
    let w = Vector::zeros(sc.dims().n_w);
    for _ in 0..steps {
        let out = estimate_with(&mut state, design).unwrap();
        let u = sc.controller.control(&out.theta.rows(0, sc.dims().n).into_owned());
        let step = plant_step(sc, &x, &w, &u).unwrap();
        state.record(u, step.y).unwrap();
        x = step.x_next;
    }
    state
}

fn mhe_window(c: &mut Criterion) {
    let scenario = build_example_scenario();
    let cert = example_certificate(&scenario, &DetectOptions::default()).unwrap();
    let design = MheDesign::robust(&cert, &MheConfig::default(), &scenario).unwrap();
    let state = warmed_state(&design, 20);
    let problem = WindowProblem::new(&design, &state).unwrap();
    let start = problem.prior_point();
    let mut group = c.benchmark_group("mhe");
    group.sample_size(20);
    group.bench_function("example_window_n15_cold", |b| b.iter(|| problem.solve(&start)));
    group.finish();
}

criterion_group!(benches, sdp, mhe_window);
criterion_main!(benches);
