//! Finite-difference checks of every differentiable piece of the pipeline.

use clast::gradcheck::{run_suite, DEFAULT_INSTANCES, TOL};

#[test]
fn every_case_matches_central_differences() {
    let reports = run_suite(DEFAULT_INSTANCES, None).unwrap();
    let mut failed = Vec::new();
    for r in &reports {
        println!("{:<24} instances {:>3} entries {:>7} max rel err {:.2e} abs {:.2e}", r.name, r.instances, r.entries, r.max_rel_err, r.max_abs_err);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    assert!(failed.is_empty(), "above {TOL:e}: {failed:?}");
}
