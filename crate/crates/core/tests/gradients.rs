mod common;

#[test]
fn backprop_matches_central_differences() {
    let mut failures = Vec::new();
    for case in common::gradient_suite() {
        let err = (case.run)();
        println!("{:<28} max rel err {err:.3e} (tol {:.0e})", case.name, case.tolerance);
        if !(err <= case.tolerance) {
            failures.push(case.name);
        }
    }
    assert!(failures.is_empty(), "gradient mismatch: {failures:?}");
}
