//! Analytic gradients against central finite differences.

mod common;

#[test]
fn loss_gradient_matches_finite_differences() {
    for (case, e) in common::loss_gradient_errors(20, 1).into_iter().enumerate() {
        assert!(e < 1e-4, "case {case}: relative error {e:e}");
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let errors = common::end_to_end_gradient_errors(2);
    assert!(errors.len() >= 20);
    for (name, e) in errors {
        assert!(e < 1e-3, "{name}: relative error {e:e}");
    }
}
