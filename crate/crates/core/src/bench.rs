//! Instance generation, the N1/N0 benchmark mechanisms and experiment runs.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agd::{solve_master, FluidSolution, Market, SolverConfig, SolverTrace};
use crate::auctions::{audit_csv, discretize, run_auctions, FpdOutcome};
use crate::error::{io_err, Error, Result};
use crate::model::{
    to_json_17, DetCosts, DriverGroup, Instance, ModelKind, PriceVector, PrivateCosts, Scales,
    ShipperGroup,
};
use crate::mta::build_networks;
use crate::netio::TravelMatrix;
use crate::so_lp::{solve_so, CostMode, Formulation, SoSolution};
use crate::taskchain::num_edge_types;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Fpd,
    N1,
    N0,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Fpd => "fpd",
            Mechanism::N1 => "n1",
            Mechanism::N0 => "n0",
        }
    }

    pub fn parse(s: &str) -> Result<Mechanism> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fpd" => Ok(Mechanism::Fpd),
            "n1" => Ok(Mechanism::N1),
            "n0" => Ok(Mechanism::N0),
            other => Err(Error::Parse(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_drivers: usize,
    pub n_shippers: usize,
    pub n_windows: usize,
    pub n_od: usize,
    pub n_tasks: usize,
    pub k_max: usize,
    pub theta: f64,
    pub phi: f64,
    pub model: ModelKind,
    /// Nest scales for the NL model; default to `theta`, `phi`.
    pub theta_hat: Option<f64>,
    pub phi_hat: Option<f64>,
    pub seeds: Vec<u64>,
    pub mechanisms: Vec<Mechanism>,
    pub out_dir: Option<PathBuf>,
    /// Shipper opt-out cost `factor * t(pickup, delivery) + base`.
    pub opt_out_factor: f64,
    pub opt_out_base: f64,
    pub solver: SolverConfig,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_drivers: 5000,
            n_shippers: 5000,
            n_windows: 4,
            n_od: 10,
            n_tasks: 10,
            k_max: 2,
            theta: 1.0,
            phi: 1.0,
            model: ModelKind::Mnl,
            theta_hat: None,
            phi_hat: None,
            seeds: vec![0],
            mechanisms: vec![Mechanism::Fpd, Mechanism::N1, Mechanism::N0],
            out_dir: None,
            opt_out_factor: 2.0,
            opt_out_base: 10.0,
            solver: SolverConfig::default(),
            trace: false,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale default with both populations set to `n`.
    pub fn desk(n: usize) -> Self {
        Self {
            n_drivers: n,
            n_shippers: n,
            ..Self::default()
        }
    }

    pub fn scales(&self) -> Scales {
        match self.model {
            ModelKind::Mnl => Scales::mnl(self.theta, self.phi),
            ModelKind::Nl => Scales::nl(
                self.theta,
                self.theta_hat.unwrap_or(self.theta),
                self.phi,
                self.phi_hat.unwrap_or(self.phi),
            ),
        }
    }
}

/// Type I extreme value draw with location 0 and scale `1/scale`.
pub fn gumbel(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln() / scale
}

/// Assigns `n` agents to `groups` buckets uniformly, every bucket nonempty.
fn assign_with_coverage(
    rng: &mut ChaCha8Rng,
    n: usize,
    groups: usize,
    what: &str,
) -> Result<Vec<Vec<usize>>> {
    if n < groups {
        return Err(Error::Instance(format!(
            "{n} {what} cannot cover {groups} groups"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut out = vec![Vec::new(); groups];
    for (k, &a) in ids.iter().enumerate() {
        let g = if k < groups {
            k
        } else {
            rng.gen_range(0..groups)
        };
        out[g].push(a);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Ok(out)
}

pub fn generate_instance(
    cfg: &ExperimentConfig,
    matrix: &TravelMatrix,
    seed: u64,
) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nz = matrix.zones.len();
    let n_pairs = nz * nz.saturating_sub(1);
    if cfg.n_od > n_pairs || cfg.n_tasks > n_pairs {
        return Err(Error::Instance(format!(
            "{nz} zones give {n_pairs} distinct pairs; need {} OD pairs and {} task pairs",
            cfg.n_od, cfg.n_tasks
        )));
    }
    let pair = |k: usize| {
        let a = k / (nz - 1);
        let mut b = k % (nz - 1);
        if b >= a {
            b += 1;
        }
        [a, b]
    };
    let driver_od_pairs: Vec<[usize; 2]> = sample(&mut rng, n_pairs, cfg.n_od)
        .into_iter()
        .map(pair)
        .collect();
    let task_pairs: Vec<[usize; 2]> = sample(&mut rng, n_pairs, cfg.n_tasks)
        .into_iter()
        .map(pair)
        .collect();

    let (nt, nw) = (cfg.n_windows, cfg.n_od);
    let drivers = assign_with_coverage(&mut rng, cfg.n_drivers, nt * nw, "drivers")?;
    let shippers = assign_with_coverage(&mut rng, cfg.n_shippers, cfg.n_tasks, "shippers")?;
    let driver_groups = drivers
        .into_iter()
        .enumerate()
        .map(|(g, drivers)| DriverGroup {
            t: g / nw + 1,
            w: g % nw,
            drivers,
        })
        .collect();
    let shipper_groups = shippers
        .into_iter()
        .enumerate()
        .map(|(j, shippers)| ShipperGroup { j, shippers })
        .collect();

    let ne = num_edge_types(cfg.n_tasks);
    let shipper = (0..cfg.n_shippers)
        .map(|_| (0..=nt).map(|_| gumbel(&mut rng, cfg.theta)).collect())
        .collect();
    let driver = (0..cfg.n_drivers)
        .map(|_| {
            let mut e: Vec<f64> = (0..ne).map(|_| gumbel(&mut rng, cfg.phi)).collect();
            e[ne - 1] = 0.0;
            e
        })
        .collect();
    let det = task_pairs
        .iter()
        .map(|&[a, b]| {
            let mut c = vec![0.0; nt + 1];
            c[0] = cfg.opt_out_factor * matrix.t[a][b] + cfg.opt_out_base;
            c
        })
        .collect();

    let inst = Instance {
        zones: matrix.zones.clone(),
        travel_time: matrix.t.clone(),
        n_windows: nt,
        k_max: cfg.k_max,
        driver_od_pairs,
        task_pairs,
        driver_groups,
        shipper_groups,
        scales: cfg.scales(),
        det_costs: DetCosts { shipper: det },
        private_costs: PrivateCosts { shipper, driver },
    };
    crate::model::ensure_valid(&inst)?;
    Ok(inst)
}

/// Travel-time matrix of the built-in desk network.
pub fn default_matrix() -> TravelMatrix {
    crate::netio::zone_travel_times(&crate::netio::default_network())
        .expect("grid is strongly connected")
}

/// Small instance on the desk network, for tests and examples.
pub fn small_instance(n: usize, n_tasks: usize, seed: u64) -> Instance {
    let cfg = ExperimentConfig {
        n_drivers: n,
        n_shippers: n,
        n_windows: 2,
        n_od: 2,
        n_tasks,
        ..ExperimentConfig::default()
    };
    generate_instance(&cfg, &default_matrix(), seed).expect("valid small config")
}

/// One FPD run: master problem, rounding and group auctions.
#[derive(Clone, Debug)]
pub struct FpdRun {
    pub fluid: FluidSolution,
    pub trace: SolverTrace,
    pub auctions: FpdOutcome,
    /// Master CPU plus the mean shipper and mean driver sub-problem CPU.
    pub cpu_seconds: f64,
}

pub fn run_fpd(inst: &Instance, solver: &SolverConfig, seed: u64) -> Result<FpdRun> {
    let market = Market::new(inst);
    let (fluid, trace) = solve_master(&market, solver)?;
    if !fluid.converged {
        log::warn!("master problem stopped at the iteration limit without meeting all criteria");
    }
    let quota = discretize(inst, &market.nets, &fluid, seed);
    let auctions = run_auctions(inst, &market.nets, quota)?;
    let cpu_seconds = trace.cpu_seconds + auctions.mean_shipper_cpu() + auctions.mean_driver_cpu();
    Ok(FpdRun {
        fluid,
        trace,
        auctions,
        cpu_seconds,
    })
}

/// Perfect-information benchmark: the system-optimal program on true costs.
pub fn run_n1(inst: &Instance) -> Result<SoSolution> {
    solve_so(inst, CostMode::True, Formulation::Path)
}

/// No-information benchmark: the program on deterministic costs, with the
/// resulting assignment evaluated under true costs.
pub fn run_n0(inst: &Instance) -> Result<SoSolution> {
    solve_so(inst, CostMode::Deterministic, Formulation::Path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub cpu_seconds: f64,
    /// Total surplus (negated total true cost); for N1 the program bound.
    pub objective: f64,
    pub objective_rel_error: Option<f64>,
    pub mean_price_rel_error: Option<f64>,
    pub error: Option<String>,
}

/// `(z1 - z) / |z1|` on surpluses.
pub fn objective_rel_error(z1: f64, z: f64) -> f64 {
    (z1 - z) / z1.abs().max(f64::MIN_POSITIVE)
}

/// Mean relative price difference over entries where the reference price is
/// positive.
pub fn mean_price_rel_error(reference: &PriceVector, p: &PriceVector) -> Option<f64> {
    let diffs: Vec<f64> = reference
        .p
        .iter()
        .zip(&p.p)
        .filter(|(r, _)| **r > 1e-9)
        .map(|(r, v)| (v - r).abs() / r)
        .collect();
    (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
}

pub const METRICS_HEADER: &str =
    "mechanism,seed,cpu_seconds,objective,objective_rel_error,mean_price_rel_error,error";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.mechanism.name(),
            r.seed,
            r.cpu_seconds,
            r.objective,
            opt(r.objective_rel_error),
            opt(r.mean_price_rel_error),
            err
        );
    }
    s
}

pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let f = rec.get(i).unwrap_or("");
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse()
                    .map(Some)
                    .map_err(|_| Error::Parse(format!("bad number {f:?} in metrics")))
            }
        };
        out.push(MetricsRow {
            mechanism: Mechanism::parse(rec.get(0).unwrap_or(""))?,
            seed: rec
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse("bad seed in metrics".into()))?,
            cpu_seconds: num(2)?.unwrap_or(f64::NAN),
            objective: num(3)?.unwrap_or(f64::NAN),
            objective_rel_error: num(4)?,
            mean_price_rel_error: num(5)?,
            error: rec.get(6).filter(|e| !e.is_empty()).map(String::from),
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation of the objective error per mechanism.
pub fn summarize(rows: &[MetricsRow]) -> Vec<(Mechanism, usize, f64, f64, f64)> {
    let mut out = Vec::new();
    for m in [Mechanism::Fpd, Mechanism::N1, Mechanism::N0] {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.mechanism == m)
            .filter_map(|r| r.objective_rel_error)
            .collect();
        let cpu: Vec<f64> = rows
            .iter()
            .filter(|r| r.mechanism == m && r.error.is_none())
            .map(|r| r.cpu_seconds)
            .collect();
        if cpu.is_empty() {
            continue;
        }
        let n = errs.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            errs.iter().sum::<f64>() / n as f64
        };
        let sd = if n < 2 {
            0.0
        } else {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        out.push((m, n, mean, sd, cpu.iter().sum::<f64>() / cpu.len() as f64));
    }
    out
}

fn write_file(dir: &std::path::Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io_err(path))
}

/// Runs every configured mechanism on every seed. Seeds run one after the
/// other so process CPU clocks are not shared between runs; a failed run is
/// recorded in its row and the experiment continues.
pub fn run_experiment(cfg: &ExperimentConfig, matrix: &TravelMatrix) -> Result<Vec<MetricsRow>> {
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let inst = match generate_instance(cfg, matrix, seed) {
            Ok(i) => i,
            Err(e) => {
                for &m in &cfg.mechanisms {
                    rows.push(failed(m, seed, &e));
                }
                continue;
            }
        };
        let nets = build_networks(&inst);
        let n1 = if cfg.mechanisms.contains(&Mechanism::N1) {
            Some(run_n1(&inst))
        } else {
            None
        };
        let (z1, p1) = match &n1 {
            Some(Ok(s)) => (Some(-s.lp_objective), Some(s.prices.clone())),
            _ => (None, None),
        };
        for &m in &cfg.mechanisms {
            let row = match m {
                Mechanism::Fpd => run_fpd(&inst, &cfg.solver, seed).and_then(|run| {
                    if let Some(dir) = &cfg.out_dir {
                        if cfg.trace {
                            write_file(dir, &format!("trace_fpd_{seed}.csv"), &run.trace.to_csv())?;
                        }
                        write_file(
                            dir,
                            &format!("outcome_fpd_{seed}.json"),
                            &to_json_17(&run.auctions.outcome)?,
                        )?;
                        write_file(
                            dir,
                            &format!("audit_fpd_{seed}.csv"),
                            &audit_csv(&inst, &nets, &run.auctions.outcome),
                        )?;
                    }
                    let z = run.auctions.outcome.realized_surplus;
                    Ok(MetricsRow {
                        mechanism: m,
                        seed,
                        cpu_seconds: run.cpu_seconds,
                        objective: z,
                        objective_rel_error: z1.map(|z1| objective_rel_error(z1, z)),
                        mean_price_rel_error: p1
                            .as_ref()
                            .and_then(|p1| mean_price_rel_error(p1, &run.fluid.prices)),
                        error: None,
                    })
                }),
                Mechanism::N1 | Mechanism::N0 => {
                    let res = if m == Mechanism::N1 {
                        cached_n1(&n1)
                    } else {
                        run_n0(&inst)
                    };
                    res.and_then(|s| {
                        if let Some(dir) = &cfg.out_dir {
                            write_file(
                                dir,
                                &format!("outcome_{}_{seed}.json", m.name()),
                                &to_json_17(&s.outcome)?,
                            )?;
                        }
                        let z = if m == Mechanism::N1 {
                            -s.lp_objective
                        } else {
                            s.outcome.realized_surplus
                        };
                        Ok(MetricsRow {
                            mechanism: m,
                            seed,
                            cpu_seconds: s.cpu_seconds,
                            objective: z,
                            objective_rel_error: z1.map(|z1| objective_rel_error(z1, z)),
                            mean_price_rel_error: match m {
                                Mechanism::N1 => None,
                                _ => p1
                                    .as_ref()
                                    .and_then(|p1| mean_price_rel_error(p1, &s.prices)),
                            },
                            error: None,
                        })
                    })
                }
            };
            rows.push(row.unwrap_or_else(|e| {
                log::error!("{} seed {seed}: {e}", m.name());
                failed(m, seed, &e)
            }));
        }
    }
    if let Some(dir) = &cfg.out_dir {
        write_file(dir, "metrics.csv", &metrics_csv(&rows))?;
    }
    Ok(rows)
}

fn cached_n1(n1: &Option<Result<SoSolution>>) -> Result<SoSolution> {
    match n1 {
        Some(Ok(s)) => Ok(s.clone()),
        Some(Err(e)) => Err(Error::Auction(format!("N1 failed: {e}"))),
        None => Err(Error::Auction("N1 not run".into())),
    }
}

fn failed(mechanism: Mechanism, seed: u64, e: &Error) -> MetricsRow {
    MetricsRow {
        mechanism,
        seed,
        cpu_seconds: f64::NAN,
        objective: f64::NAN,
        objective_rel_error: None,
        mean_price_rel_error: None,
        error: Some(e.to_string()),
    }
}
