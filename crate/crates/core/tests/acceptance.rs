//! Acceptance suite: one pass/fail line per criterion, tolerances pinned in
//! `giftlab::harness::checks`. Runs without the libtest harness so every
//! line is printed; exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use giftlab::harness::checks::{self, CheckOutcome};

fn main() -> ExitCode {
    let start = Instant::now();
    let mut outcomes: Vec<CheckOutcome> = Vec::with_capacity(10);
    let mut report = |o: CheckOutcome| {
        println!("{}", o.line());
        outcomes.push(o);
    };
    report(checks::gradient_oracle());
    report(checks::loss_identities());
    report(checks::metric_oracle());
    report(checks::fisher_dynamics());
    let (forgetting, ordering) = checks::method_sweep();
    report(forgetting);
    report(ordering);
    report(checks::alignment_premise());
    report(checks::landscape_anchors());
    report(checks::determinism());
    report(checks::teacher_invariance());

    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
