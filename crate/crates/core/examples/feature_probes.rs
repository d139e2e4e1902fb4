//! Trains vanilla and feature-normalized models, then probes one client:
//! spectral gap of the feature matrix, norm growth under local training and
//! the accuracy lost on the classes the client never sees.

use fednorm::config::ExperimentConfig;
use fednorm::experiment::{analyze, run_in_memory, AnalysisRecord, AnalyzeOptions, Probe};

fn main() -> fednorm::Result<()> {
    for norm in ["none", "fn_last"] {
        let config = ExperimentConfig::load_with_overrides(None, &[format!("model.norm=\"{norm}\"")])?;
        let model = run_in_memory(&config)?.model;
        let opts = AnalyzeOptions { steps: 50, ..AnalyzeOptions::default() };
        println!("== {norm}");
        for probe in [Probe::Spectrum, Probe::Norms, Probe::Overfit] {
            match analyze(&config, &model, probe, &opts)? {
                AnalysisRecord::Spectrum { report, .. } => {
                    println!("spectral gap σ1/σ2: {:.2}", report.spectral_gap);
                }
                AnalysisRecord::Norms { trace, .. } => {
                    let first = trace.records.first().map(|r| r.max_feature_norm()).unwrap_or(0.0);
                    let last = trace.records.last().map(|r| r.max_feature_norm()).unwrap_or(0.0);
                    println!("max feature norm: {first:.3} -> {last:.3} over {} steps", opts.steps);
                }
                AnalysisRecord::Overfit { report, .. } => {
                    println!(
                        "other-class accuracy: {:.3} -> {:.3}",
                        report.other_class_acc_before().unwrap_or(f64::NAN),
                        report.other_class_acc_after().unwrap_or(f64::NAN)
                    );
                }
            }
        }
    }
    Ok(())
}
