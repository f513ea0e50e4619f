//! Finite-difference verification of every differentiable tape operation.

use emma::gradcheck;

#[test]
fn standard_suite_stays_within_tolerance() {
    let start = std::time::Instant::now();
    let outcomes = gradcheck::run_standard_suite(20, 0x5eed).expect("suite runs");
    let elapsed = start.elapsed();
    assert!(outcomes.len() >= 20, "expected at least 20 op families, got {}", outcomes.len());
    for o in &outcomes {
        assert!(
            o.passed(),
            "{}: max relative error {:.3e} exceeds {:.1e}",
            o.name,
            o.max_rel_err,
            o.tolerance
        );
    }
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "gradient suite took {:.1}s, budget is 120s",
        elapsed.as_secs_f64()
    );
}
