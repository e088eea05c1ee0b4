mod support;

use support::{check_op, OPS, REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for op in OPS {
        let worst = check_op(op);
        println!("{op:<24} max rel error {worst:.3e}");
        if !(worst < REL_TOL) {
            failures.push((op, worst));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
