mod common;

use common::*;

#[test]
fn analytic_gradients_match_central_differences() {
    let cases = gradient_suite(0..3);
    let mut bad = Vec::new();
    for c in &cases {
        println!("{:<40} worst {:.2e} checked {} skipped {}", c.name, c.report.worst, c.report.checked, c.report.skipped);
        if c.report.worst > c.tolerance || c.report.checked == 0 || c.report.skipped_fraction() > 0.01 {
            bad.push(c.name.clone());
        }
    }
    assert!(bad.is_empty(), "failing: {bad:?}");
}
