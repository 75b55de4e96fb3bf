use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use csd_cli::load_matrix;

#[derive(Parser)]
#[command(name = "netio", about = "Road network utilities")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Shortest-path zone travel times of a TNTP network, as CSV.
    Convert {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Convert { net, out } => {
            let m = load_matrix(Some(&net))?;
            m.save(&out)?;
            println!("{} zones -> {}", m.zones.len(), out.display());
        }
    }
    Ok(())
}
