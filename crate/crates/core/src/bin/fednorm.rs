use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fednorm::config::ExperimentConfig;
use fednorm::experiment::{self, AnalyzeOptions, Probe};
use fednorm::model::load_checkpoint;
use fednorm::verify::{run_suite, Suite, VerifyOptions};
use fednorm::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "fednorm", version, about = "Federated-learning simulator and normalization laboratory")]
struct Cli {
    /// Worker threads for client-parallel training.
    #[arg(long, global = true, env = "FEDNORM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check reductions, expressive power, homogeneity and gradients.
    Verify {
        /// fn_reduction | ln_reduction | prop3 (alias agreement) | gradients | homogeneity | all
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Give the reduction networks inner biases; the checks should fail.
        #[arg(long)]
        inject_bias: bool,
        /// Write the reports here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-client label histograms of the configured partition.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe a checkpoint: feature spectrum, norm growth, local overfitting.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// spectrum | norms | overfit (repeatable)
        #[arg(long = "probe", required = true)]
        probes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        client: usize,
        /// Local steps for the norms and overfit probes.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Test samples in the probe set.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; the shipped default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` with a dotted key, e.g. `federation.lr=0.03`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> fednorm::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load_with_overrides(self.config.as_deref(), &overrides)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Degenerate(_) | Error::Shape(_) | Error::TapeConsumed => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn emit_lines<T: serde::Serialize>(out: Option<&Path>, items: &[T]) -> fednorm::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    match out {
        Some(p) => std::fs::write(p, buf)?,
        None => io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

fn execute(command: Command) -> fednorm::Result<u8> {
    match command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let summary = experiment::run_to_dir(&cfg, &dir)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} rounds, final global accuracy {:.4}; artifacts in {}",
                summary.rounds,
                summary.final_global_acc,
                dir.display()
            );
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            inject_bias,
            out,
        } => {
            let suite: Suite = suite.parse().map_err(|e: Error| Error::config("suite", e.to_string()))?;
            let opts = VerifyOptions {
                seed,
                inject_bias,
                ..VerifyOptions::default()
            };
            let outcomes = run_suite(suite, &opts)?;
            for o in &outcomes {
                eprintln!("{}: {}", o.name, if o.passed { "pass" } else { "FAIL" });
            }
            emit_lines(out.as_deref(), &outcomes)?;
            Ok(if outcomes.iter().all(|o| o.passed) { 0 } else { EXIT_VERIFY })
        }
        Command::Partition { config, out } => {
            let cfg = config.load()?;
            let (records, warnings) = experiment::partition_records(&cfg)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            emit_lines(out.as_deref(), &records)?;
            Ok(0)
        }
        Command::Analyze {
            config,
            checkpoint,
            probes,
            client,
            steps,
            samples,
            out,
        } => {
            let cfg = config.load()?;
            let probes = probes
                .iter()
                .map(|p| p.parse::<Probe>().map_err(|e| Error::config("--probe", e.to_string())))
                .collect::<fednorm::Result<Vec<_>>>()?;
            let model = load_checkpoint(&checkpoint)
                .map_err(|e| Error::config("--checkpoint", format!("{}: {e}", checkpoint.display())))?;
            let opts = AnalyzeOptions {
                client,
                steps,
                probes: samples,
            };
            let records = probes
                .into_iter()
                .map(|p| experiment::analyze(&cfg, &model, p, &opts))
                .collect::<fednorm::Result<Vec<_>>>()?;
            emit_lines(out.as_deref(), &records)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
