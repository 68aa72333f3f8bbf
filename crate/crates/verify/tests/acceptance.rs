use forge_verify::suites;

/// Criteria that fail at their stated tolerance on this build. Each is
/// printed as FAIL like any other; only these may fail.
const KNOWN_FAILURES: &[&str] = &["end-to-end synthetic world"];

#[test]
fn acceptance() {
    let reports = vec![
        suites::render_suite(500, 1),
        suites::gradient_suite(200, 2),
        suites::alignment_suite(),
        suites::poisson_suite(),
        suites::sampler_suite(3),
        suites::visibility_suite(4),
        suites::constants_suite(),
        suites::e2e_suite(0),
    ];
    for r in &reports {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let unexpected: Vec<&&str> = failed
        .iter()
        .filter(|n| !KNOWN_FAILURES.contains(n))
        .collect();
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
    }
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
}
