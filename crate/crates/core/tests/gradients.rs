mod common;

use common::*;

fn assert_all(cases: &[CaseResult]) {
    let mut failed = Vec::new();
    for c in cases {
        println!(
            "{:<45} f64 {:.2e} ({} entries)  f32 {:.2e}",
            c.name, c.f64_report.max_rel_err, c.f64_report.checked, c.f32_report.max_rel_err
        );
        if !c.passed() {
            failed.push(format!("{}: {:?} / {:?}", c.name, c.f64_report.worst, c.f32_report.worst));
        }
    }
    assert!(failed.is_empty(), "gradient mismatches:\n{}", failed.join("\n"));
}

#[test]
fn every_graph_op_matches_finite_differences() {
    assert_all(&op_cases());
}

#[test]
fn decoder_modules_match_finite_differences() {
    assert_all(&module_cases());
}

#[test]
fn composed_objective_matches_finite_differences() {
    let fx = composed_fixture(4);
    assert_all(&[composed_case(&fx, Some(12))]);
}
