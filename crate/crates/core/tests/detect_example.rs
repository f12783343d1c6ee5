use std::sync::OnceLock;

use robust_mhe::detect::*;
use robust_mhe::iqc::build_static_polytopic_template;
use robust_mhe::model::*;
use robust_mhe::SymMatrix;

fn scenario() -> Scenario {
    build_example_scenario()
}

fn cert() -> &'static DetectabilityCertificate {
    static CERT: OnceLock<DetectabilityCertificate> = OnceLock::new();
    CERT.get_or_init(|| example_certificate(&scenario(), &DetectOptions::default()).expect("grid certificate"))
}

#[test]
fn grid_certificate_is_found_at_099() {
    let c = cert();
    assert!((c.rho * c.rho - 0.99).abs() < 1e-12, "rho2 = {}", c.rho * c.rho);
    assert!(c.margin > 1e-6);
    assert_eq!(c.dims.n_chi(), 2 * (2 + 2 * EXAMPLE_NU));
}

#[test]
fn grid_certificate_rechecks() {
    let check = recheck_certificate(cert()).unwrap();
    assert!(check.passed(), "{check:?}");
    assert!(cert().interior_max_eig <= 1e-6);
}

#[test]
fn grid_certificate_dissipation_holds_on_sampled_pairs() {
    let r = validate_certificate(cert(), &scenario(), 1000, 50, 11).unwrap();
    assert!(r.steps_checked >= 1000, "{r:?}");
    assert!(r.passed(1e-7), "{r:?}");
}

#[test]
fn corrupted_certificate_is_rejected() {
    let mut c = cert().clone();
    let mut p = c.p.as_matrix().clone();
    p[(0, 0)] *= 0.5;
    c.p = SymMatrix::new(p);
    assert!(!recheck_certificate(&c).unwrap().passed());

    let mut c = cert().clone();
    c.multiplier.params[0] += 1.0;
    assert!(recheck_certificate(&c).unwrap().multiplier_violation > 1e-7);
}

#[test]
fn static_only_is_infeasible() {
    let s = scenario();
    let t = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
    for rho2 in [0.86f64, 0.99] {
        let r = verify_detectability(&s, &t, rho2.sqrt(), &DetectOptions::default());
        assert!(matches!(r, Err(DetectError::Infeasible { .. })), "rho2 {rho2}: {r:?}");
    }
}

#[test]
fn symmetric_order_two_combined_is_infeasible_at_086() {
    let rho = 0.86f64.sqrt();
    let t = example_template(2, 0.0, 0.25, 1, rho).unwrap();
    let r = verify_detectability(&scenario(), &t, rho, &DetectOptions::default());
    assert!(matches!(r, Err(DetectError::Infeasible { .. })), "{r:?}");
}

#[test]
fn nominal_feasibility_threshold() {
    let s = scenario();
    let opts = DetectOptions::default();
    assert!(matches!(verify_nominal(&s, 0.86f64.sqrt(), &opts), Err(DetectError::Infeasible { .. })));
    let c = verify_nominal(&s, 0.95f64.sqrt(), &opts).unwrap();
    assert!(c.nominal && c.dims.n_psi == 0);
    assert!(recheck_certificate(&c).unwrap().passed());
}

#[test]
fn inflating_the_envelope_does_not_raise_the_margin() {
    let s = scenario();
    let rho = cert().rho;
    let inflated = Scenario {
        envelope: s.envelope.inflated(1.1),
        ..s.clone()
    };
    let t = example_template_with(EXAMPLE_NU, 0.0, 0.25, 1, rho, false).unwrap();
    match verify_detectability(&inflated, &t, rho, &DetectOptions::default()) {
        Ok(c) => assert!(c.margin <= cert().margin + 1e-6, "{} vs {}", c.margin, cert().margin),
        Err(DetectError::Infeasible { .. } | DetectError::Solver(_) | DetectError::InteriorViolation { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}
