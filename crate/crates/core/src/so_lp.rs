//! Exact system-optimal matching LPs for the N1 (true costs) and N0
//! (deterministic costs) benchmarks.
//!
//! Two equivalent formulations are provided. The edge form gives every
//! driver a unit flow on the task-chain network with per-driver conservation
//! rows; the path form gives every driver one convex-combination row over the
//! enumerated bundles. Both share shipper single-choice rows and the coupling
//! rows `sum(task visits in t) - sum(shippers choosing t) >= 0` whose duals are
//! the task-window prices.

use csd_lp::{LinearProgram, LpSolution, RowSense, Sense, Status, INTEGRALITY_TOL};

use crate::error::{Error, Result};
use crate::model::{Instance, MatchOutcome, PriceVector};
use crate::mta::build_networks;
use crate::taskchain::{enumerate_paths, Node, Path, TaskChainNetwork};

/// Upper bound on drivers times layered edges for the edge form.
pub const EDGE_FORM_GUARD: f64 = 5e6;
/// Upper bound on non-convexity rows kept in the dense simplex basis.
pub const DENSE_ROW_GUARD: f64 = 6000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    /// Sampled private costs included (N1).
    True,
    /// Private draws set to zero (N0).
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    Edge,
    Path,
}

#[derive(Clone, Debug)]
enum DriverCols {
    /// `(var, layer, edge)` per layered edge.
    Edge(Vec<(usize, usize, usize)>),
    /// `(var, path)` per enumerated path of the driver's network.
    Path(Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
pub struct SoProgram {
    pub lp: LinearProgram,
    pub form: Formulation,
    pub mode: CostMode,
    /// First of `T + 1` consecutive option variables, per shipper id.
    shipper_var0: Vec<usize>,
    /// Per driver id.
    driver_cols: Vec<DriverCols>,
    /// Coupling row per price index `(t-1)*J + j`.
    pub coupling_rows: Vec<usize>,
    nets: Vec<TaskChainNetwork>,
    paths: Vec<Vec<Path>>,
}

/// True perceived cost of shipper `b` (task `j`) choosing option `t`.
pub fn shipper_true_cost(inst: &Instance, j: usize, b: usize, t: usize, mode: CostMode) -> f64 {
    let c = inst.det_costs.shipper[j][t];
    match mode {
        CostMode::True => c - inst.private_costs.shipper[b][t],
        CostMode::Deterministic => c,
    }
}

/// True perceived cost of driver `a` on an edge of type `etype`.
pub fn driver_edge_cost(
    net: &TaskChainNetwork,
    inst: &Instance,
    a: usize,
    etype: usize,
    mode: CostMode,
) -> f64 {
    let c = net.type_cost[etype];
    match mode {
        CostMode::True => c - inst.private_costs.driver[a][etype],
        CostMode::Deterministic => c,
    }
}

fn shipper_block(
    inst: &Instance,
    lp: &mut LinearProgram,
    mode: CostMode,
    var0: &mut [usize],
    coupling: &mut [Vec<(usize, f64)>],
) {
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    for grp in &inst.shipper_groups {
        for &b in &grp.shippers {
            let first = lp.num_vars();
            var0[b] = first;
            let vars: Vec<usize> = (0..=nt)
                .map(|t| lp.add_bounded_var(shipper_true_cost(inst, grp.j, b, t, mode), 0.0, 1.0))
                .collect();
            lp.add_row(vars.iter().map(|&v| (v, 1.0)).collect(), RowSense::Eq, 1.0);
            for t in 1..=nt {
                coupling[(t - 1) * nj + grp.j].push((vars[t], -1.0));
            }
        }
    }
}

fn finish(mut lp: LinearProgram, coupling: Vec<Vec<(usize, f64)>>) -> (LinearProgram, Vec<usize>) {
    let rows = coupling
        .into_iter()
        .map(|coeffs| lp.add_row(coeffs, RowSense::Ge, 0.0))
        .collect();
    (lp, rows)
}

pub fn build_so_edge_lp(inst: &Instance, mode: CostMode) -> Result<SoProgram> {
    let nets = build_networks(inst);
    let edges_per_driver = nets.first().map_or(0, TaskChainNetwork::num_edges) as f64;
    let size = inst.n_drivers() as f64 * edges_per_driver;
    if size > EDGE_FORM_GUARD {
        return Err(Error::Guard {
            what: "drivers x layered edges",
            size,
            limit: EDGE_FORM_GUARD,
        });
    }
    let nodes_per_driver = (inst.k_max * (inst.n_tasks() + 1)) as f64;
    let dense_rows =
        inst.n_drivers() as f64 * nodes_per_driver + (inst.n_windows * inst.n_tasks()) as f64;
    if dense_rows > DENSE_ROW_GUARD {
        return Err(Error::Guard {
            what: "edge-form conservation rows",
            size: dense_rows,
            limit: DENSE_ROW_GUARD,
        });
    }
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    let mut lp = LinearProgram::new(Sense::Minimize);
    let mut coupling = vec![Vec::new(); nt * nj];
    let mut shipper_var0 = vec![usize::MAX; inst.n_shippers()];
    shipper_block(inst, &mut lp, mode, &mut shipper_var0, &mut coupling);
    let mut driver_cols = vec![DriverCols::Edge(Vec::new()); inst.n_drivers()];
    for grp in &inst.driver_groups {
        let net = &nets[grp.w];
        let k_stages = net.layers.len();
        for &a in &grp.drivers {
            let mut cols = Vec::with_capacity(net.num_edges());
            // balance[k][node]: inflow minus outflow coefficients at stage k.
            let mut balance: Vec<Vec<Vec<(usize, f64)>>> =
                vec![vec![Vec::new(); nj + 2]; k_stages + 1];
            for (k, layer) in net.layers.iter().enumerate() {
                for (e, edge) in layer.iter().enumerate() {
                    let v = lp.add_bounded_var(
                        driver_edge_cost(net, inst, a, edge.etype, mode),
                        0.0,
                        1.0,
                    );
                    cols.push((v, k, e));
                    balance[k][edge.from.id(nj)].push((v, -1.0));
                    balance[k + 1][edge.to.id(nj)].push((v, 1.0));
                    if let Some(j) = edge.reward_task {
                        coupling[(grp.t - 1) * nj + j].push((v, 1.0));
                    }
                }
            }
            let source: Vec<(usize, f64)> = balance[0][Node::Origin.id(nj)]
                .iter()
                .map(|&(v, _)| (v, 1.0))
                .collect();
            lp.add_row(source, RowSense::Eq, 1.0);
            for stage in balance.iter_mut().take(k_stages).skip(1) {
                for coeffs in stage.iter_mut() {
                    if !coeffs.is_empty() {
                        lp.add_row(std::mem::take(coeffs), RowSense::Eq, 0.0);
                    }
                }
            }
            driver_cols[a] = DriverCols::Edge(cols);
        }
    }
    let (lp, coupling_rows) = finish(lp, coupling);
    Ok(SoProgram {
        lp,
        form: Formulation::Edge,
        mode,
        shipper_var0,
        driver_cols,
        coupling_rows,
        nets,
        paths: Vec::new(),
    })
}

pub fn build_so_path_lp(inst: &Instance, mode: CostMode) -> Result<SoProgram> {
    let nets = build_networks(inst);
    let paths = nets
        .iter()
        .map(enumerate_paths)
        .collect::<Result<Vec<_>>>()?;
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    let mut lp = LinearProgram::new(Sense::Minimize);
    let mut coupling = vec![Vec::new(); nt * nj];
    let mut shipper_var0 = vec![usize::MAX; inst.n_shippers()];
    shipper_block(inst, &mut lp, mode, &mut shipper_var0, &mut coupling);
    let mut driver_cols = vec![DriverCols::Path(Vec::new()); inst.n_drivers()];
    for grp in &inst.driver_groups {
        let net = &nets[grp.w];
        for &a in &grp.drivers {
            let mut cols = Vec::with_capacity(paths[grp.w].len());
            for (r, path) in paths[grp.w].iter().enumerate() {
                let cost: f64 = path
                    .types
                    .iter()
                    .map(|&e| driver_edge_cost(net, inst, a, e, mode))
                    .sum();
                let v = lp.add_bounded_var(cost, 0.0, 1.0);
                cols.push((v, r));
                for &j in &path.bundle {
                    let row = &mut coupling[(grp.t - 1) * nj + j];
                    match row.last_mut() {
                        Some((last, c)) if *last == v => *c += 1.0,
                        _ => row.push((v, 1.0)),
                    }
                }
            }
            lp.add_row(
                cols.iter().map(|&(v, _)| (v, 1.0)).collect(),
                RowSense::Eq,
                1.0,
            );
            driver_cols[a] = DriverCols::Path(cols);
        }
    }
    let (lp, coupling_rows) = finish(lp, coupling);
    Ok(SoProgram {
        lp,
        form: Formulation::Path,
        mode,
        shipper_var0,
        driver_cols,
        coupling_rows,
        nets,
        paths,
    })
}

#[derive(Clone, Debug)]
pub struct SoSolution {
    pub outcome: MatchOutcome,
    /// Optimal LP objective under the costs the program was built with.
    pub lp_objective: f64,
    /// Total true perceived cost of the assignment.
    pub true_cost: f64,
    /// Coupling-row duals.
    pub prices: PriceVector,
    pub pivots: usize,
    pub max_fractional_residual: f64,
    /// Whether rounding had to move shippers to opt-out.
    pub repaired: bool,
    pub cpu_seconds: f64,
}

impl SoProgram {
    pub fn solve(&self) -> Result<LpSolution> {
        let sol = self.lp.solve()?;
        if sol.status != Status::Optimal {
            return Err(Error::Instance(format!(
                "system-optimal program is {:?}",
                sol.status
            )));
        }
        Ok(sol)
    }

    /// Integral assignment read from an optimal solution; a fractional
    /// solution is an error.
    pub fn extract(&self, inst: &Instance, sol: &LpSolution) -> Result<MatchOutcome> {
        let residual = sol.all_fractional_residual();
        if residual > INTEGRALITY_TOL {
            return Err(Error::Integrality {
                residual,
                context: format!("{:?}-form system-optimal program", self.form),
            });
        }
        Ok(self.round(inst, sol).0)
    }

    /// Largest-weight rounding of a possibly fractional solution, followed by
    /// moving uncovered shippers to opt-out (cheapest moves first). Returns
    /// whether any shipper had to be moved.
    pub fn round(&self, inst: &Instance, sol: &LpSolution) -> (MatchOutcome, bool) {
        let argmax = |vals: &mut dyn Iterator<Item = f64>| {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, v) in vals.enumerate() {
                if v > best.1 + 1e-12 {
                    best = (i, v);
                }
            }
            best.0
        };
        let nt = inst.n_windows;
        let mut shipper_assign: Vec<usize> = self
            .shipper_var0
            .iter()
            .map(|&v0| {
                if v0 == usize::MAX {
                    0
                } else {
                    argmax(&mut (0..=nt).map(|t| sol.x[v0 + t]))
                }
            })
            .collect();
        let mut driver_assign = vec![Vec::new(); inst.n_drivers()];
        for grp in &inst.driver_groups {
            let net = &self.nets[grp.w];
            for &a in &grp.drivers {
                driver_assign[a] = match &self.driver_cols[a] {
                    DriverCols::Path(cols) => {
                        let r = cols[argmax(&mut cols.iter().map(|&(v, _)| sol.x[v]))].1;
                        self.paths[grp.w][r].types.clone()
                    }
                    DriverCols::Edge(cols) => {
                        let mut types = Vec::with_capacity(net.layers.len());
                        let mut at = Node::Origin;
                        let mut base = 0;
                        for (k, layer) in net.layers.iter().enumerate() {
                            let out: Vec<usize> =
                                (0..layer.len()).filter(|&e| layer[e].from == at).collect();
                            let e = out[argmax(&mut out.iter().map(|&e| sol.x[cols[base + e].0]))];
                            debug_assert_eq!(cols[base + e].1, k);
                            types.push(layer[e].etype);
                            at = layer[e].to;
                            base += layer.len();
                        }
                        types
                    }
                };
            }
        }

        let nj = inst.n_tasks();
        let mut slack = coverage_slack(inst, &self.nets, &shipper_assign, &driver_assign);
        let mut moved = false;
        for t in 1..=nt {
            for j in 0..nj {
                let short = -slack[(t - 1) * nj + j];
                if short <= 0 {
                    continue;
                }
                let grp = &inst.shipper_groups[j];
                let mut users: Vec<(f64, usize)> = grp
                    .shippers
                    .iter()
                    .filter(|&&b| shipper_assign[b] == t)
                    .map(|&b| {
                        let gain = shipper_true_cost(inst, j, b, 0, self.mode)
                            - shipper_true_cost(inst, j, b, t, self.mode);
                        (gain, b)
                    })
                    .collect();
                users.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, b) in users.iter().take(short as usize) {
                    shipper_assign[b] = 0;
                    moved = true;
                }
                slack[(t - 1) * nj + j] = 0;
            }
        }
        let mut out = MatchOutcome {
            shipper_assign,
            driver_assign,
            shipper_payments: vec![0.0; inst.n_shippers()],
            driver_rewards: vec![0.0; inst.n_drivers()],
            realized_surplus: 0.0,
        };
        out.realized_surplus = -realized_cost(inst, &self.nets, &out);
        (out, moved)
    }

    pub fn prices(&self, inst: &Instance, sol: &LpSolution) -> PriceVector {
        let p = self
            .coupling_rows
            .iter()
            .map(|&r| sol.duals[r].max(0.0))
            .collect();
        PriceVector::from_vec(inst.n_windows, inst.n_tasks(), p)
    }
}

/// Total true perceived cost of an assignment.
pub fn realized_cost(inst: &Instance, nets: &[TaskChainNetwork], out: &MatchOutcome) -> f64 {
    let mut z = 0.0;
    for grp in &inst.shipper_groups {
        for &b in &grp.shippers {
            z += shipper_true_cost(inst, grp.j, b, out.shipper_assign[b], CostMode::True);
        }
    }
    for grp in &inst.driver_groups {
        for &a in &grp.drivers {
            z += out.driver_assign[a]
                .iter()
                .map(|&e| driver_edge_cost(&nets[grp.w], inst, a, e, CostMode::True))
                .sum::<f64>();
        }
    }
    z
}

/// Solves the program and rounds its solution. A fractional optimum is kept
/// as the objective bound; the returned assignment is the repaired rounding.
pub fn solve_so(inst: &Instance, mode: CostMode, form: Formulation) -> Result<SoSolution> {
    let cpu0 = crate::cputime::process_seconds();
    let prog = match form {
        Formulation::Edge => build_so_edge_lp(inst, mode)?,
        Formulation::Path => build_so_path_lp(inst, mode)?,
    };
    let sol = prog.solve()?;
    let residual = sol.all_fractional_residual();
    if residual > INTEGRALITY_TOL {
        log::warn!("{form:?}-form system-optimal program has a fractional optimum (residual {residual:.3e}); rounding");
    }
    let (outcome, repaired) = prog.round(inst, &sol);
    let cpu_seconds = crate::cputime::process_seconds() - cpu0;
    Ok(SoSolution {
        true_cost: -outcome.realized_surplus,
        prices: prog.prices(inst, &sol),
        lp_objective: sol.objective,
        pivots: sol.pivots,
        max_fractional_residual: residual,
        repaired,
        cpu_seconds,
        outcome,
    })
}

fn coverage_slack(
    inst: &Instance,
    nets: &[TaskChainNetwork],
    shipper_assign: &[usize],
    driver_assign: &[Vec<usize>],
) -> Vec<i64> {
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    let mut slack = vec![0i64; nt * nj];
    for grp in &inst.shipper_groups {
        for &b in &grp.shippers {
            let t = shipper_assign[b];
            if t > 0 {
                slack[(t - 1) * nj + grp.j] -= 1;
            }
        }
    }
    for grp in &inst.driver_groups {
        let net = &nets[grp.w];
        for &a in &grp.drivers {
            for (k, &e) in driver_assign[a].iter().enumerate() {
                if let Some(edge) = net.layers[k].iter().find(|x| x.etype == e) {
                    if let Some(j) = edge.reward_task {
                        slack[(grp.t - 1) * nj + j] += 1;
                    }
                }
            }
        }
    }
    slack
}

/// Feasibility of an assignment: each window-task's shippers are covered by
/// driver visits.
pub fn check_coverage(inst: &Instance, nets: &[TaskChainNetwork], out: &MatchOutcome) -> bool {
    coverage_slack(inst, nets, &out.shipper_assign, &out.driver_assign)
        .iter()
        .all(|&s| s >= 0)
}
