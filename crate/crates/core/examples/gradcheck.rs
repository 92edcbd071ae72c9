//! Finite-difference check of every layer's backward pass.

use mobiletl::gradcheck::run_gradcheck;

fn main() -> mobiletl::Result<()> {
    let report = run_gradcheck(1, 20)?;
    for l in &report.layers {
        println!(
            "{:<24} {:>3} instances  max rel err {:.2e}  {}",
            l.layer,
            l.instances,
            l.max_rel_error,
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {:.0e}: {}",
        report.tolerance,
        if report.passed { "all passed" } else { "failures" }
    );
    Ok(())
}
