//! FedAvg on the one-class split with each normalization mode.
//!
//! ```text
//! cargo run --release --example compare_norms -- [seed]
//! ```

use fednorm::config::ExperimentConfig;
use fednorm::experiment::run_in_memory;

const MODES: [&str; 6] = ["none", "fn_last", "ln_layerwise", "ln_reduced", "bn", "gn:2"];

fn main() -> fednorm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("{:<14} {:>8}", "norm", "accuracy");
    for mode in MODES {
        let overrides = [format!("seed={seed}"), format!("model.norm=\"{mode}\"")];
        let config = ExperimentConfig::load_with_overrides(None, &overrides)?;
        let acc = run_in_memory(&config)?.summary.final_global_acc;
        println!("{mode:<14} {acc:>8.3}");
    }
    Ok(())
}
