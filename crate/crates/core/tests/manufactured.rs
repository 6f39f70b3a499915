use jpinn::verify::{domain_points, manufactured_cases, manufactured_residual};

#[test]
fn every_manufactured_case_has_zero_residual() {
    let cases = manufactured_cases();
    assert!(cases.len() >= 5);
    for case in &cases {
        let pts = domain_points(&case.domain, 200);
        let r = manufactured_residual(case, &pts).unwrap();
        assert!(r < 1e-6, "{}: residual {r:e}", case.name);
    }
}

#[test]
fn perturbed_coefficients_break_every_nontrivial_case() {
    for mut case in manufactured_cases().into_iter().skip(1) {
        let pts = domain_points(&case.domain, 50);
        case.theta.rho += 0.05;
        let r = manufactured_residual(&case, &pts).unwrap();
        assert!((r - 0.05).abs() < 1e-6, "{}: {r}", case.name);
    }
}

#[test]
fn dropping_z_terms_only_matters_for_z_dependent_fields() {
    let cases = manufactured_cases();
    let mut flat = manufactured_cases().swap_remove(3);
    flat.use_z = true;
    let pts = domain_points(&flat.domain, 50);
    assert!(manufactured_residual(&flat, &pts).unwrap() < 1e-6);
    let mut hilly = manufactured_cases().swap_remove(4);
    hilly.use_z = false;
    let pts = domain_points(&hilly.domain, 50);
    let z_part = cases[4].theta.v[2] * 0.7 - cases[4].theta.p[2] * 0.49;
    assert!((manufactured_residual(&hilly, &pts).unwrap() - z_part.abs()).abs() < 1e-6);
}
