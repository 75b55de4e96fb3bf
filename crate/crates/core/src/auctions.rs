//! Particle stage: rounding the fluid solution to integer quotas and running
//! one VCG auction per shipper group and per driver group.

use std::fmt::Write as _;

use csd_lp::{LinearProgram, RowSense, Sense, Status, INTEGRALITY_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agd::FluidSolution;
use crate::error::{Error, Result};
use crate::model::{Instance, MatchOutcome};
use crate::so_lp::{driver_edge_cost, realized_cost, shipper_true_cost, CostMode};
use crate::taskchain::{enumerate_paths, Node, Path, TaskChainNetwork};

/// Integer targets handed to the auctions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerQuota {
    /// `y_int[j][t]`; `t = 0` is opt-out.
    pub y_int: Vec<Vec<usize>>,
    /// `x_int[g][k][e]`, aligned with the layers of group `g`'s network.
    pub x_int: Vec<Vec<Vec<usize>>>,
    /// Shipper permits moved to opt-out for lack of driver visits.
    pub moved_to_opt_out: usize,
    /// Driver visits removed because no shipper permit was left for them.
    pub dropped_visits: usize,
}

fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < 1e-9 {
        v.round()
    } else {
        v
    }
}

/// Integer vector summing to `total`, proportional to `target`; the units left
/// after flooring go to the largest remainders, ties to the lower index.
pub fn largest_remainder(target: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = target.iter().map(|v| v.max(0.0)).sum();
    if sum <= 0.0 {
        let mut out = vec![0; target.len()];
        if let Some(first) = out.first_mut() {
            *first = total;
        }
        return out;
    }
    let scaled: Vec<f64> = target
        .iter()
        .map(|v| snap(v.max(0.0) * total as f64 / sum))
        .collect();
    let mut out: Vec<usize> = scaled.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut have: usize = out.iter().sum();
    for &i in order.iter().cycle() {
        if have >= total {
            break;
        }
        out[i] += 1;
        have += 1;
    }
    while have > total {
        let i = (0..out.len()).max_by_key(|&i| out[i]).unwrap();
        out[i] -= 1;
        have -= 1;
    }
    out
}

/// Systematic rounding of `n` units over `weights` with offset `u` in [0,1).
pub fn systematic_round(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut out = vec![0; weights.len()];
    if n == 0 || total <= 0.0 {
        return out;
    }
    let mut cum = 0.0;
    let mut prev = snap(0.0 + u).floor() as usize;
    for (i, w) in weights.iter().enumerate() {
        cum += w.max(0.0);
        let pos = if i + 1 == weights.len() {
            n as f64
        } else {
            snap(n as f64 * cum / total)
        };
        let here = (pos + u).floor() as usize;
        out[i] = here - prev;
        prev = here;
    }
    out
}

/// Layer-edge positions of the path serving `bundle` in order.
pub fn bundle_edges(net: &TaskChainNetwork, bundle: &[usize]) -> Vec<usize> {
    let mut at = Node::Origin;
    net.layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let to = bundle.get(k).map_or(Node::Dest, |&j| Node::Task(j));
            let e = layer
                .iter()
                .position(|e| e.from == at && e.to == to)
                .expect("bundle longer than the chain limit");
            at = to;
            e
        })
        .collect()
}

/// Integer paths for `n` drivers walking the layers: each path prefix's count
/// is split over the out-edges of its last node in proportion to the fluid
/// flows. Returns `(bundle, count)` pairs.
pub fn discretize_group(
    net: &TaskChainNetwork,
    x: &[Vec<f64>],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(Vec<usize>, usize)> {
    // (bundle, current node, count)
    let mut states = vec![(Vec::new(), Node::Origin, n)];
    for (k, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::new();
        for (bundle, at, m) in states {
            if m == 0 {
                continue;
            }
            let edges: Vec<usize> = (0..layer.len()).filter(|&e| layer[e].from == at).collect();
            let mut w: Vec<f64> = edges.iter().map(|&e| x[k][e]).collect();
            if w.iter().all(|&v| v <= 0.0) {
                // Truncated flow: leave towards the destination.
                w = edges
                    .iter()
                    .map(|&e| if layer[e].to == Node::Dest { 1.0 } else { 0.0 })
                    .collect();
            }
            for (&e, c) in edges.iter().zip(systematic_round(&w, m, rng.gen())) {
                if c == 0 {
                    continue;
                }
                let to = layer[e].to;
                let mut b = bundle.clone();
                if let Node::Task(j) = to {
                    b.push(j);
                }
                next.push((b, to, c));
            }
        }
        states = next;
    }
    let mut out: Vec<(Vec<usize>, usize)> = Vec::new();
    for (b, _, c) in states {
        match out.iter_mut().find(|(ob, _)| *ob == b) {
            Some(entry) => entry.1 += c,
            None => out.push((b, c)),
        }
    }
    out.sort();
    out
}

/// Edge counts of a set of integer paths.
pub fn path_counts_to_edges(
    net: &TaskChainNetwork,
    paths: &[(Vec<usize>, usize)],
) -> Vec<Vec<usize>> {
    let mut x: Vec<Vec<usize>> = net.layers.iter().map(|l| vec![0; l.len()]).collect();
    for (b, c) in paths {
        for (k, e) in bundle_edges(net, b).into_iter().enumerate() {
            x[k][e] += c;
        }
    }
    x
}

/// Rounds the fluid solution to integer quotas that balance exactly: every
/// driver visit to `(t,j)` has a shipper permit. Permits beyond the visits of
/// their window move first to a window of the same task with spare visits,
/// then to opt-out; spare visits first take opt-out permits, and any visit
/// still unused is dropped from one driver's path.
pub fn discretize(
    inst: &Instance,
    nets: &[TaskChainNetwork],
    fluid: &FluidSolution,
    seed: u64,
) -> IntegerQuota {
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    let mut paths: Vec<Vec<(Vec<usize>, usize)>> = inst
        .driver_groups
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            discretize_group(&nets[grp.w], &fluid.loads[g].x, grp.drivers.len(), &mut rng)
        })
        .collect();
    let mut supply = vec![vec![0usize; nt + 1]; nj];
    for (grp, pg) in inst.driver_groups.iter().zip(&paths) {
        for (b, c) in pg {
            for &j in b {
                supply[j][grp.t] += c;
            }
        }
    }
    let mut y_int: Vec<Vec<usize>> = inst
        .shipper_groups
        .iter()
        .map(|grp| largest_remainder(&fluid.y[grp.j], grp.shippers.len()))
        .collect();
    // Permits beyond the visits of their window shift to another window of
    // the same task; spare visits take opt-out permits.
    let mut short = Vec::new();
    for j in 0..nj {
        let (yj, sj) = (&mut y_int[j], &supply[j]);
        for t in 1..=nt {
            while yj[t] > sj[t] {
                yj[t] -= 1;
                match (1..=nt).find(|&u| yj[u] < sj[u]) {
                    Some(u) => yj[u] += 1,
                    None => short.push(j),
                }
            }
        }
        for t in 1..=nt {
            while yj[t] < sj[t] && yj[0] > 0 {
                yj[0] -= 1;
                yj[t] += 1;
            }
        }
    }
    // A permit left without a visit is served by rerouting a spare visit of
    // another task when that is cheaper than opting the shipper out.
    let mut moved = 0;
    for j in short {
        let spare: Vec<(usize, usize)> = (0..nj)
            .flat_map(|i| (1..=nt).map(move |t| (t, i)))
            .filter(|&(t, i)| y_int[i][t] < supply[i][t])
            .collect();
        let det = &inst.det_costs.shipper[j];
        let best = spare
            .iter()
            .filter_map(|&(t, i)| {
                let (delta, at) = best_edit(inst, nets, &paths, t, i, Some(j))?;
                let (drop_delta, _) = best_edit(inst, nets, &paths, t, i, None)?;
                let gain = det[0] + drop_delta - (delta + det[t]);
                (gain > 0.0).then_some((gain, t, i, at))
            })
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((_, t, i, at)) => {
                apply_edit(&mut paths, at, Some(j));
                supply[i][t] -= 1;
                supply[j][t] += 1;
                y_int[j][t] += 1;
            }
            None => {
                y_int[j][0] += 1;
                moved += 1;
            }
        }
    }
    let mut n_dropped = 0;
    for j in 0..nj {
        for t in 1..=nt {
            while y_int[j][t] < supply[j][t] {
                let (_, at) =
                    best_edit(inst, nets, &paths, t, j, None).expect("a visit to drop exists");
                apply_edit(&mut paths, at, None);
                supply[j][t] -= 1;
                n_dropped += 1;
            }
        }
    }
    let x_int = inst
        .driver_groups
        .iter()
        .zip(&paths)
        .map(|(grp, pg)| path_counts_to_edges(&nets[grp.w], pg))
        .collect();
    IntegerQuota {
        y_int,
        x_int,
        moved_to_opt_out: moved,
        dropped_visits: n_dropped,
    }
}

type EditAt = (usize, usize, usize);

fn bundle_cost(net: &TaskChainNetwork, b: &[usize]) -> f64 {
    bundle_edges(net, b)
        .iter()
        .enumerate()
        .map(|(k, &e)| net.layers[k][e].cost)
        .sum()
}

fn edited(b: &[usize], pos: usize, to: Option<usize>) -> Vec<usize> {
    let mut nb = b.to_vec();
    match to {
        Some(j) => nb[pos] = j,
        None => {
            nb.remove(pos);
        }
    }
    nb
}

/// Cheapest change, in deterministic cost, of one driver path in window `t`
/// that replaces a visit to task `i` by a visit to `to`, or drops it when
/// `to` is `None`. Returns the cost change and where to apply it.
fn best_edit(
    inst: &Instance,
    nets: &[TaskChainNetwork],
    paths: &[Vec<(Vec<usize>, usize)>],
    t: usize,
    i: usize,
    to: Option<usize>,
) -> Option<(f64, EditAt)> {
    let mut best: Option<(f64, EditAt)> = None;
    for (g, grp) in inst.driver_groups.iter().enumerate() {
        if grp.t != t {
            continue;
        }
        let net = &nets[grp.w];
        for (r, (b, _)) in paths[g].iter().enumerate() {
            for pos in (0..b.len()).filter(|&p| b[p] == i) {
                let delta = bundle_cost(net, &edited(b, pos, to)) - bundle_cost(net, b);
                if best.map_or(true, |(d, _)| delta < d) {
                    best = Some((delta, (g, r, pos)));
                }
            }
        }
    }
    best
}

fn apply_edit(paths: &mut [Vec<(Vec<usize>, usize)>], (g, r, pos): EditAt, to: Option<usize>) {
    let nb = edited(&paths[g][r].0, pos, to);
    paths[g][r].1 -= 1;
    match paths[g].iter_mut().find(|(b, _)| *b == nb) {
        Some(entry) => entry.1 += 1,
        None => paths[g].push((nb, 1)),
    }
    paths[g].retain(|(_, c)| *c > 0);
}

/// Agents each take one option; every coupling row fixes how many agents
/// take an option in its list. Values are declared and normalised so the
/// `sink` option (opting out) is worth 0; `-inf` marks a forbidden option.
#[derive(Clone, Debug)]
pub struct AssignmentProblem {
    pub values: Vec<Vec<f64>>,
    pub rows: Vec<(Vec<usize>, usize)>,
    pub sink: usize,
    /// The rows pin the count of every option, so an agent's removal can be
    /// priced by exchange chains.
    pub counts_fixed: bool,
}

#[derive(Clone, Debug)]
pub struct Assignment {
    pub choice: Vec<usize>,
    pub welfare: f64,
    pub max_fractional_residual: f64,
}

impl AssignmentProblem {
    fn n_options(&self) -> usize {
        self.values.first().map_or(self.sink + 1, Vec::len)
    }

    /// Declared-welfare maximum without agent `skip`; `None` if infeasible.
    /// `relax` turns the coupling rows into upper bounds.
    pub fn solve(&self, skip: Option<usize>, relax: bool) -> Result<Option<Assignment>> {
        let no = self.n_options();
        let mut lp = LinearProgram::new(Sense::Maximize);
        let mut var = vec![vec![usize::MAX; no]; self.values.len()];
        let mut in_row = vec![Vec::new(); no];
        for (r, (opts, _)) in self.rows.iter().enumerate() {
            for &o in opts {
                in_row[o].push(r);
            }
        }
        let mut coeffs = vec![Vec::new(); self.rows.len()];
        for (a, vals) in self.values.iter().enumerate() {
            if Some(a) == skip {
                continue;
            }
            let mut gub = Vec::new();
            for (o, &v) in vals.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let x = lp.add_bounded_var(v, 0.0, 1.0);
                var[a][o] = x;
                gub.push((x, 1.0));
                for &r in &in_row[o] {
                    coeffs[r].push((x, 1.0));
                }
            }
            if gub.is_empty() {
                return Err(Error::Auction(format!(
                    "agent {a} has no admissible option"
                )));
            }
            lp.add_row(gub, RowSense::Eq, 1.0);
        }
        let sense = if relax { RowSense::Le } else { RowSense::Eq };
        for (c, (_, rhs)) in coeffs.into_iter().zip(&self.rows) {
            if c.is_empty() {
                if *rhs > 0 && !relax {
                    return Ok(None);
                }
                continue;
            }
            lp.add_row(c, sense, *rhs as f64);
        }
        if lp.num_vars() == 0 {
            let ok = relax || self.rows.iter().all(|(_, r)| *r == 0);
            return Ok(ok.then(|| Assignment {
                choice: Vec::new(),
                welfare: 0.0,
                max_fractional_residual: 0.0,
            }));
        }
        let sol = lp.solve()?;
        match sol.status {
            Status::Optimal => {}
            Status::Infeasible => return Ok(None),
            Status::Unbounded => return Err(Error::Auction("assignment program unbounded".into())),
        }
        let residual = sol.all_fractional_residual();
        let choice = var
            .iter()
            .map(|vs| {
                (0..no)
                    .filter(|&o| vs[o] != usize::MAX)
                    .max_by(|&p, &q| sol.x[vs[p]].total_cmp(&sol.x[vs[q]]))
                    .unwrap_or(self.sink)
            })
            .collect();
        Ok(Some(Assignment {
            choice,
            welfare: sol.objective,
            max_fractional_residual: residual,
        }))
    }

    /// Best value of a chain of moves that refills one slot of each option
    /// and vacates one slot of the sink, or of any option when `any_end`;
    /// `-inf` where no chain exists.
    pub fn refill_values(&self, choice: &[usize], any_end: bool) -> Vec<f64> {
        let no = self.n_options();
        let mut w = vec![vec![f64::NEG_INFINITY; no]; no];
        for (vals, &v) in self.values.iter().zip(choice) {
            for (u, &val) in vals.iter().enumerate() {
                if u != v && val > f64::NEG_INFINITY {
                    let gain = val - vals[v];
                    if gain > w[u][v] {
                        w[u][v] = gain;
                    }
                }
            }
        }
        let mut d = vec![if any_end { 0.0 } else { f64::NEG_INFINITY }; no];
        d[self.sink] = 0.0;
        for _ in 1..no {
            let mut changed = false;
            for u in 0..no {
                if u == self.sink && !any_end {
                    continue;
                }
                for v in 0..no {
                    if d[v] > f64::NEG_INFINITY
                        && w[u][v] > f64::NEG_INFINITY
                        && w[u][v] + d[v] > d[u] + 1e-12
                    {
                        d[u] = w[u][v] + d[v];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        d
    }
}

/// Outcome of one group auction, in the group's local agent order.
#[derive(Clone, Debug)]
pub struct AuctionResult {
    pub choice: Vec<usize>,
    /// Clarke pivot `W_{-i} - (W - v_i)` in declared-value units: what a
    /// shipper pays, or minus what a driver receives.
    pub transfers: Vec<f64>,
    pub declared_welfare: f64,
    pub max_fractional_residual: f64,
    /// Agents priced without an opt-out slot to remove.
    pub relaxed: usize,
    pub cpu_seconds: f64,
}

/// Step 2 and step 3 of the VCG mechanism on an assignment problem.
pub fn run_vcg(prob: &AssignmentProblem, context: &str) -> Result<AuctionResult> {
    let cpu0 = crate::cputime::thread_seconds();
    let main = prob
        .solve(None, false)?
        .ok_or_else(|| Error::Auction(format!("{context}: quotas are infeasible")))?;
    if main.max_fractional_residual > INTEGRALITY_TOL {
        return Err(Error::Integrality {
            residual: main.max_fractional_residual,
            context: context.to_string(),
        });
    }
    let (refill, refill_any) = if prob.counts_fixed {
        (
            prob.refill_values(&main.choice, false),
            prob.refill_values(&main.choice, true),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mut relaxed = 0;
    let mut transfers = Vec::with_capacity(main.choice.len());
    for (a, &c) in main.choice.iter().enumerate() {
        let t = if c == prob.sink {
            0.0
        } else if prob.counts_fixed && refill[c] > f64::NEG_INFINITY {
            refill[c]
        } else if prob.counts_fixed {
            // No opt-out slot to give up: the world without the agent drops
            // whichever single slot the others can best do without.
            relaxed += 1;
            refill_any[c]
        } else {
            let without = match prob.solve(Some(a), false)? {
                Some(s) => s.welfare,
                None => {
                    relaxed += 1;
                    prob.solve(Some(a), true)?
                        .ok_or_else(|| {
                            Error::Auction(format!("{context}: relaxed program infeasible"))
                        })?
                        .welfare
                }
            };
            without - (main.welfare - prob.values[a][c])
        };
        transfers.push(if t.abs() < 1e-12 { 0.0 } else { t });
    }
    Ok(AuctionResult {
        choice: main.choice,
        transfers,
        declared_welfare: main.welfare,
        max_fractional_residual: main.max_fractional_residual,
        relaxed,
        cpu_seconds: crate::cputime::thread_seconds() - cpu0,
    })
}

/// Truthful shipper values `c_0 - c_t` for the shippers of task `j`.
pub fn truthful_shipper_values(inst: &Instance, j: usize) -> Vec<Vec<f64>> {
    inst.shipper_groups[j]
        .shippers
        .iter()
        .map(|&b| {
            let c: Vec<f64> = (0..=inst.n_windows)
                .map(|t| shipper_true_cost(inst, j, b, t, CostMode::True))
                .collect();
            c.iter().map(|ct| c[0] - ct).collect()
        })
        .collect()
}

/// Shipper auction: option values per shipper, permits per option.
pub fn run_shipper_auction(values: &[Vec<f64>], y_int: &[usize]) -> Result<AuctionResult> {
    let total: usize = y_int.iter().sum();
    if total != values.len() {
        return Err(Error::Auction(format!(
            "{} permits for {} shippers",
            total,
            values.len()
        )));
    }
    let prob = AssignmentProblem {
        values: values.to_vec(),
        rows: (1..y_int.len()).map(|t| (vec![t], y_int[t])).collect(),
        sink: 0,
        counts_fixed: true,
    };
    run_vcg(&prob, "shipper auction")
}

/// Truthful driver bids: perceived cost per edge type.
pub fn truthful_driver_bids(
    inst: &Instance,
    net: &TaskChainNetwork,
    drivers: &[usize],
) -> Vec<Vec<f64>> {
    drivers
        .iter()
        .map(|&a| {
            (0..net.type_cost.len())
                .map(|e| driver_edge_cost(net, inst, a, e, CostMode::True))
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DriverAuction {
    pub result: AuctionResult,
    /// Index into the enumerated paths chosen by each driver.
    pub paths: Vec<usize>,
    /// Reward paid to each driver.
    pub rewards: Vec<f64>,
}

/// Driver auction over the paths of `net` (`paths[0]` is opt-out) with
/// integer quotas on task-headed edges. Paths through a zero-quota task edge
/// are never offered.
pub fn run_driver_auction(
    net: &TaskChainNetwork,
    paths: &[Path],
    bids: &[Vec<f64>],
    x_int: &[Vec<usize>],
) -> Result<DriverAuction> {
    let task_edge = |k: usize, e: usize| net.layers[k][e].reward_task.is_some();
    let kept: Vec<usize> = (0..paths.len())
        .filter(|&r| {
            paths[r]
                .edges
                .iter()
                .enumerate()
                .all(|(k, &e)| !task_edge(k, e) || x_int[k][e] > 0)
        })
        .collect();
    let sink = kept
        .iter()
        .position(|&r| paths[r].bundle.is_empty())
        .ok_or_else(|| Error::Auction("no opt-out path".into()))?;
    let mut rows = Vec::new();
    for (k, layer) in net.layers.iter().enumerate() {
        for e in 0..layer.len() {
            if task_edge(k, e) && x_int[k][e] > 0 {
                let opts = (0..kept.len())
                    .filter(|&o| paths[kept[o]].edges[k] == e)
                    .collect();
                rows.push((opts, x_int[k][e]));
            }
        }
    }
    let values = bids
        .iter()
        .map(|c| {
            let cost = |r: usize| paths[r].types.iter().map(|&e| c[e]).sum::<f64>();
            let base = cost(kept[sink]);
            kept.iter().map(|&r| base - cost(r)).collect()
        })
        .collect();
    let prob = AssignmentProblem {
        values,
        rows,
        sink,
        // With at most two tasks per chain a path is identified by its last
        // task-headed edge, so edge quotas pin the path counts.
        counts_fixed: net.k_max <= 2,
    };
    let result = run_vcg(&prob, "driver auction")?;
    Ok(DriverAuction {
        paths: result.choice.iter().map(|&o| kept[o]).collect(),
        rewards: result
            .transfers
            .iter()
            .map(|t| if *t == 0.0 { 0.0 } else { -t })
            .collect(),
        result,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FpdOutcome {
    pub outcome: MatchOutcome,
    pub quota: IntegerQuota,
    pub shipper_cpu: Vec<f64>,
    pub driver_cpu: Vec<f64>,
    pub max_fractional_residual: f64,
    pub relaxed_payments: usize,
    /// Shipper payments minus driver rewards.
    pub platform_balance: f64,
}

impl FpdOutcome {
    pub fn mean_shipper_cpu(&self) -> f64 {
        mean(&self.shipper_cpu)
    }

    pub fn mean_driver_cpu(&self) -> f64 {
        mean(&self.driver_cpu)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs every group auction under truthful bidding and assembles the outcome.
pub fn run_auctions(
    inst: &Instance,
    nets: &[TaskChainNetwork],
    quota: IntegerQuota,
) -> Result<FpdOutcome> {
    let paths: Vec<Vec<Path>> = nets.iter().map(enumerate_paths).collect::<Result<_>>()?;
    let shippers: Vec<AuctionResult> = inst
        .shipper_groups
        .par_iter()
        .map(|grp| run_shipper_auction(&truthful_shipper_values(inst, grp.j), &quota.y_int[grp.j]))
        .collect::<Result<_>>()?;
    let drivers: Vec<DriverAuction> = inst
        .driver_groups
        .par_iter()
        .enumerate()
        .map(|(g, grp)| {
            let net = &nets[grp.w];
            run_driver_auction(
                net,
                &paths[grp.w],
                &truthful_driver_bids(inst, net, &grp.drivers),
                &quota.x_int[g],
            )
        })
        .collect::<Result<_>>()?;

    let mut out = MatchOutcome {
        shipper_assign: vec![0; inst.n_shippers()],
        driver_assign: vec![Vec::new(); inst.n_drivers()],
        shipper_payments: vec![0.0; inst.n_shippers()],
        driver_rewards: vec![0.0; inst.n_drivers()],
        realized_surplus: 0.0,
    };
    for (grp, res) in inst.shipper_groups.iter().zip(&shippers) {
        for (i, &b) in grp.shippers.iter().enumerate() {
            out.shipper_assign[b] = res.choice[i];
            out.shipper_payments[b] = res.transfers[i];
        }
    }
    for (grp, res) in inst.driver_groups.iter().zip(&drivers) {
        for (i, &a) in grp.drivers.iter().enumerate() {
            out.driver_assign[a] = paths[grp.w][res.paths[i]].types.clone();
            out.driver_rewards[a] = res.rewards[i];
        }
    }
    out.realized_surplus = -realized_cost(inst, nets, &out);
    let balance = out.shipper_payments.iter().sum::<f64>() - out.driver_rewards.iter().sum::<f64>();
    let residual = shippers
        .iter()
        .map(|r| r.max_fractional_residual)
        .chain(drivers.iter().map(|d| d.result.max_fractional_residual))
        .fold(0.0, f64::max);
    Ok(FpdOutcome {
        shipper_cpu: shippers.iter().map(|r| r.cpu_seconds).collect(),
        driver_cpu: drivers.iter().map(|d| d.result.cpu_seconds).collect(),
        relaxed_payments: shippers.iter().map(|r| r.relaxed).sum::<usize>()
            + drivers.iter().map(|d| d.result.relaxed).sum::<usize>(),
        max_fractional_residual: residual,
        platform_balance: balance,
        outcome: out,
        quota,
    })
}

/// Per-agent audit table `agent_id,group,choice,payment,true_cost`. Driver
/// payments are negated rewards; a driver's choice lists its tasks.
pub fn audit_csv(inst: &Instance, nets: &[TaskChainNetwork], out: &MatchOutcome) -> String {
    let mut s = String::from("agent_id,group,choice,payment,true_cost\n");
    for grp in &inst.shipper_groups {
        for &b in &grp.shippers {
            let t = out.shipper_assign[b];
            let cost = shipper_true_cost(inst, grp.j, b, t, CostMode::True);
            let _ = writeln!(s, "s{b},j{},{t},{},{cost}", grp.j, out.shipper_payments[b]);
        }
    }
    for grp in &inst.driver_groups {
        let net = &nets[grp.w];
        for &a in &grp.drivers {
            let types = &out.driver_assign[a];
            let cost: f64 = types
                .iter()
                .map(|&e| driver_edge_cost(net, inst, a, e, CostMode::True))
                .sum();
            let tasks: Vec<String> = types
                .iter()
                .enumerate()
                .filter_map(|(k, &e)| {
                    net.layers[k]
                        .iter()
                        .find(|x| x.etype == e)
                        .and_then(|x| x.reward_task)
                })
                .map(|j| j.to_string())
                .collect();
            let choice = if tasks.is_empty() {
                "none".to_string()
            } else {
                tasks.join("-")
            };
            let _ = writeln!(
                s,
                "d{a},t{}w{},{choice},{},{cost}",
                grp.t, grp.w, -out.driver_rewards[a]
            );
        }
    }
    s
}
