use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use netbilevel::harness::{self, RunConfig};

/// Decentralized stochastic bilevel optimization simulator.
#[derive(Parser)]
#[command(name = "netbilevel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and stream records.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
        /// Extra `key=value` overrides, e.g. `topology=star neumann_j=5`.
        overrides: Vec<String>,
    },
    /// Print the step-size bounds of both convergence theorems as JSON.
    Bounds {
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Summarize a JSONL record file.
    Inspect { records: PathBuf },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    init_batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

impl RunFlags {
    fn as_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        let quoted = |s: &str| format!("{s:?}");
        push("algo", self.algo.as_deref().map(quoted));
        push("eta", self.eta.map(float));
        push("beta1", self.beta1.map(float));
        push("beta2", self.beta2.map(float));
        push("alpha1", self.alpha1.map(float));
        push("alpha2", self.alpha2.map(float));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("init_batch", self.init_batch.map(|v| v.to_string()));
        push("iters", self.iters.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("dataset", self.dataset.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("val_frac", self.val_frac.map(float));
        push("max_samples", self.max_samples.map(|v| v.to_string()));
        push("output_path", self.output.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("output_format", self.format.as_deref().map(quoted));
        out
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn load(config: Option<&PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            flags,
            overrides,
        } => {
            let mut cfg = load(config.as_ref())?;
            cfg.apply_overrides(&flags.as_overrides())?;
            cfg.apply_overrides(&overrides)?;
            let records = harness::run_experiment(&cfg)?;
            if cfg.output_path.is_none() {
                for r in &records {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                let s = harness::summarize(&records)?;
                eprintln!(
                    "{} records, final t = {}, upper loss {:.6} -> {:.6}",
                    s.records, s.last_t, s.initial_upper_loss, s.final_upper_loss
                );
            }
        }
        Command::Bounds { config, overrides } => {
            let mut cfg = load(config.as_ref())?;
            cfg.apply_overrides(&overrides)?;
            let report = harness::bounds_report(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Inspect { records } => {
            let s = harness::inspect(&records)
                .with_context(|| format!("reading {}", records.display()))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}
