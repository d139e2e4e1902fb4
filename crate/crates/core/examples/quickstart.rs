//! Runs the shipped one-class experiment for 100 rounds and prints the
//! accuracy curve.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use fednorm::config::ExperimentConfig;
use fednorm::experiment::run_with;

fn main() -> fednorm::Result<()> {
    let mut config = ExperimentConfig::default();
    config.federation.rounds = 100;

    let out = run_with(&config, |r| {
        println!("round {:>3}  acc {:.3}  local loss {:.4}", r.round, r.global_acc, r.mean_local_loss);
        Ok(())
    })?;

    let s = &out.summary;
    println!("{:?} / {}: final accuracy {:.3}", s.algorithm, s.norm, s.final_global_acc);
    for (k, acc) in s.per_class_acc.iter().enumerate() {
        if let Some(a) = acc {
            println!("  class {k}: {a:.3}");
        }
    }
    Ok(())
}
