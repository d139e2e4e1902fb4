//! Runs the structural checks: reductions to a vanilla network, prediction
//! equivalence, homogeneity and gradient agreement. Pass `--inject-bias` to
//! watch the reductions fail with a counterexample.

use fednorm::verify::{run_suite, Suite, VerifyOptions};

fn main() -> fednorm::Result<()> {
    let opts = VerifyOptions {
        inject_bias: std::env::args().any(|a| a == "--inject-bias"),
        ..VerifyOptions::default()
    };
    for outcome in run_suite(Suite::All, &opts)? {
        let mark = if outcome.passed { "pass" } else { "FAIL" };
        println!("{mark}  {}", outcome.name);
        if !outcome.passed {
            println!("      {}", outcome.detail);
        }
    }
    Ok(())
}
