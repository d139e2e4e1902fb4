//! Vanilla and feature-normalized models under each federated algorithm.
//! FedBN needs batch-norm layers and runs with `bn` in both columns' place.

use fednorm::config::ExperimentConfig;
use fednorm::experiment::run_in_memory;

const ALGORITHMS: [(&str, &str); 7] = [
    ("fedavg", "{ name = \"fed_avg\" }"),
    ("fedprox", "{ name = \"fed_prox\", mu = 0.01 }"),
    ("scaffold", "{ name = \"scaffold\" }"),
    ("fedlc", "{ name = \"fed_lc\", tau = 1.0 }"),
    ("fedrs", "{ name = \"fed_rs\", alpha = 0.5 }"),
    ("feddecorr", "{ name = \"fed_decorr\", alpha = 0.1 }"),
    ("fedbn", "{ name = \"fed_bn\" }"),
];

fn accuracy(algo: &str, norm: &str) -> fednorm::Result<f64> {
    let overrides = [format!("federation.algorithm={algo}"), format!("model.norm=\"{norm}\"")];
    let config = ExperimentConfig::load_with_overrides(None, &overrides)?;
    Ok(run_in_memory(&config)?.summary.final_global_acc)
}

fn main() -> fednorm::Result<()> {
    println!("{:<10} {:>8} {:>8}", "algorithm", "none", "fn_last");
    for (label, algo) in ALGORITHMS {
        if label == "fedbn" {
            println!("{label:<10} {:>8.3} (bn)", accuracy(algo, "bn")?);
            continue;
        }
        println!("{label:<10} {:>8.3} {:>8.3}", accuracy(algo, "none")?, accuracy(algo, "fn_last")?);
    }
    Ok(())
}
