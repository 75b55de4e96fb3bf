use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use csd_cli::{load_config, load_matrix, parse_mechanisms};
use csd_core::bench::{generate_instance, read_metrics, run_experiment, summarize};

#[derive(Parser)]
#[command(name = "csd", about = "Crowdsourced-delivery matching experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed overriding the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Road network (TNTP) or zone matrix (CSV); default is the built-in grid.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate instance files.
    Gen(Common),
    /// Run mechanisms and write metrics and outcomes.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of fpd,n1,n0.
        #[arg(long)]
        mechanisms: Option<String>,
        /// Write per-iteration master traces.
        #[arg(long)]
        trace: bool,
    },
    /// Summarize a metrics file.
    Report {
        /// Output directory of a previous run.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Gen(c) => {
            let mut cfg = load_config(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            let matrix = load_matrix(c.net.as_deref())?;
            std::fs::create_dir_all(&c.out)
                .with_context(|| format!("creating {}", c.out.display()))?;
            for &seed in &cfg.seeds {
                let inst = generate_instance(&cfg, &matrix, seed)?;
                let path = c.out.join(format!("instance_{seed}.json"));
                inst.save(&path)?;
                println!("{}", path.display());
            }
        }
        Cmd::Run {
            common: c,
            mechanisms,
            trace,
        } => {
            let mut cfg = load_config(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            if let Some(m) = mechanisms {
                cfg.mechanisms = parse_mechanisms(&m)?;
            }
            cfg.trace |= trace;
            cfg.out_dir = Some(c.out.clone());
            let matrix = load_matrix(c.net.as_deref())?;
            let rows = run_experiment(&cfg, &matrix)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} runs, {failed} failed; metrics in {}",
                rows.len(),
                c.out.join("metrics.csv").display()
            );
        }
        Cmd::Report { out } => {
            let rows = read_metrics(&out.join("metrics.csv"))?;
            println!(
                "{:<6} {:>5} {:>14} {:>12} {:>12}",
                "mech", "n", "mean_rel_err", "std", "mean_cpu_s"
            );
            for (m, n, mean, sd, cpu) in summarize(&rows) {
                println!(
                    "{:<6} {:>5} {:>14.6} {:>12.6} {:>12.4}",
                    m.name(),
                    n,
                    mean,
                    sd,
                    cpu
                );
            }
        }
    }
    Ok(())
}
