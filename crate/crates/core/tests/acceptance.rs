//! Acceptance suite. Each test prints one pass/fail line; run with
//! `--nocapture` to see all twelve.

use stripe_impurity::acceptance::run;

fn check(id: u8) {
    let o = run(id);
    println!("{}", o.line());
    assert!(o.passed, "{}", o.line());
}

#[test]
fn criterion_01_stripe_amplitude_law() {
    check(1);
}

#[test]
fn criterion_02_hypothesis_audit() {
    check(2);
}

#[test]
fn criterion_03_lambda2_two_routes() {
    check(3);
}

#[test]
fn criterion_04_cokernel_pairing_identities() {
    check(4);
}

#[test]
fn criterion_05_gradient_impurity_mean_zero() {
    check(5);
}

#[test]
fn criterion_06_response_slopes_match_solver() {
    check(6);
}

#[test]
fn criterion_07_pinning_quadratic_residue() {
    check(7);
}

#[test]
fn criterion_08_fredholm_dimension_tables() {
    check(8);
}

#[test]
fn criterion_09_borderline_weights() {
    check(9);
}

#[test]
fn criterion_10_stripe_linearization_index() {
    check(10);
}

#[test]
fn criterion_11_bloch_conjugacy() {
    check(11);
}

#[test]
fn criterion_12_truncation_robustness() {
    check(12);
}
