//! All eleven acceptance criteria at full scale, one line each.

use std::io::Write;

use coarse1d::harness::{format_line, verify, Scale};

const SEED: u64 = 20240601;

#[test]
fn acceptance_criteria() {
    let results = verify(Scale::Full, SEED, &[]).expect("suite ran");
    // Written straight to stderr so the table shows even when the test passes.
    let mut err = std::io::stderr().lock();
    for r in &results {
        writeln!(err, "{}", format_line(r)).unwrap();
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    writeln!(err, "{} of {} criteria passed", results.len() - failed.len(), results.len()).unwrap();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
