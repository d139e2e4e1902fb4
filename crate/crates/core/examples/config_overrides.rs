//! Loads the shipped configuration, applies dotted-key overrides and shows
//! how a bad value is reported.

use fednorm::config::ExperimentConfig;

fn main() -> fednorm::Result<()> {
    let overrides = [
        "seed=42".to_string(),
        "partition.scheme={ kind = \"dirichlet\", beta = 0.3 }".to_string(),
        "federation.server_opt={ kind = \"yogi\", eta = 0.01, beta1 = 0.9, beta2 = 0.99, tau = 1e-3, v0 = 1e-6 }"
            .to_string(),
    ];
    let config = ExperimentConfig::load_with_overrides(None, &overrides)?;
    print!("{}", config.render()?);

    let bad = ExperimentConfig::load_with_overrides(None, &["federation.lr=-1".to_string()]);
    match bad {
        Err(e) => println!("\nrejected: {e}"),
        Ok(_) => println!("\nunexpectedly accepted"),
    }
    Ok(())
}
