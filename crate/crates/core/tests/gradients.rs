use std::time::Instant;

use tail2learn::gradcheck::{primitive_errors, toy_objective_errors};

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    let errs = primitive_errors().unwrap();
    assert_eq!(errs.len(), 25);
    for (name, err) in errs {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_objective_matches_finite_differences_on_toy_graph() {
    let start = Instant::now();
    for (name, err) in toy_objective_errors().unwrap() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}
