//! Shared helpers for the command-line tools.

use std::path::Path;

use anyhow::{Context, Result};
use csd_core::bench::{default_matrix, ExperimentConfig, Mechanism};
use csd_core::netio::{read_tntp, zone_travel_times, TravelMatrix};

/// Zone travel times from a TNTP network, a matrix CSV, or the built-in grid.
pub fn load_matrix(net: Option<&Path>) -> Result<TravelMatrix> {
    let Some(path) = net else {
        return Ok(default_matrix());
    };
    if path.extension().is_some_and(|e| e == "csv") {
        return TravelMatrix::load(path)
            .with_context(|| format!("loading matrix {}", path.display()));
    }
    let road = read_tntp(path).with_context(|| format!("reading network {}", path.display()))?;
    Ok(zone_travel_times(&road)?)
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

pub fn parse_mechanisms(list: &str) -> Result<Vec<Mechanism>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| Mechanism::parse(s).map_err(Into::into))
        .collect()
}
