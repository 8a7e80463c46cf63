mod common;

use common::SUITES;

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for (name, suite) in SUITES {
        let g = suite();
        println!(
            "{name:<24} max rel err {:.3e} over {} coordinates ({} non-smooth probes resampled)",
            g.max_rel_err, g.checked, g.kinked
        );
        assert!(g.checked > 0, "{name}: nothing checked");
        assert!(g.max_rel_err < TOLERANCE, "{name}: max rel err {:.3e}", g.max_rel_err);
    }
}
