//! Markovian traffic assignment on the task-chain network.
//!
//! The backward pass computes log-values `ln V(k,i)` of the expected minimum
//! cost-to-go; the forward pass pushes the group population through the
//! conditional edge-choice probabilities `w_ij V(k+1,j) / V(k,i)`.

use rayon::prelude::*;

use crate::choice::{participation_split, ModelSpec};
use crate::model::{Instance, ModelKind, PriceVector};
use crate::taskchain::{build_network, Node, Path, TaskChainNetwork};

/// Flows below this fraction of the group population are dropped.
pub const FLOW_TRUNCATION: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadingResult {
    /// `log_v[k][node]` for stages `0..=K+1`; `-inf` where a state is absent.
    pub log_v: Vec<Vec<f64>>,
    /// `pi[k][node] = -ln V / scale` for the scale used on the network.
    pub pi: Vec<Vec<f64>>,
    /// Edge flows aligned with `net.layers`.
    pub x: Vec<Vec<f64>>,
    /// Expected minimum cost of the group at the source.
    pub source_surplus: f64,
    /// Inclusive cost of the participation nest (NL only).
    pub nest_surplus: Option<f64>,
    pub population: f64,
}

fn edge_term(cost: f64, price: f64, scale: f64) -> f64 {
    -scale * (cost - price)
}

fn edge_price(e: &crate::taskchain::LayerEdge, prices_t: &[f64]) -> f64 {
    e.reward_task.map_or(0.0, |j| prices_t[j])
}

/// Log-space backward recursion. With `skip_opt_out` the (o,d) edge is
/// ignored, giving the participants-only network.
pub fn backward_pass(
    net: &TaskChainNetwork,
    prices_t: &[f64],
    scale: f64,
    skip_opt_out: bool,
) -> Vec<Vec<f64>> {
    let nn = net.n_tasks + 2;
    let kk = net.layers.len();
    let mut log_v = vec![vec![f64::NEG_INFINITY; nn]; kk + 1];
    log_v[kk][Node::Dest.id(net.n_tasks)] = 0.0;
    let mut maxes = vec![f64::NEG_INFINITY; nn];
    let mut sums = vec![0.0; nn];
    for k in (0..kk).rev() {
        let layer = &net.layers[k];
        let skip = |e: &crate::taskchain::LayerEdge| skip_opt_out && k == 0 && e.to == Node::Dest;
        maxes.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        sums.iter_mut().for_each(|s| *s = 0.0);
        let term = |e: &crate::taskchain::LayerEdge| {
            edge_term(e.cost, edge_price(e, prices_t), scale) + log_v[k + 1][e.to.id(net.n_tasks)]
        };
        for e in layer.iter().filter(|e| !skip(e)) {
            let from = e.from.id(net.n_tasks);
            maxes[from] = maxes[from].max(term(e));
        }
        for e in layer.iter().filter(|e| !skip(e)) {
            let from = e.from.id(net.n_tasks);
            if maxes[from] > f64::NEG_INFINITY {
                sums[from] += (term(e) - maxes[from]).exp();
            }
        }
        for i in 0..nn {
            if maxes[i] > f64::NEG_INFINITY {
                log_v[k][i] = maxes[i] + sums[i].ln();
            }
        }
    }
    log_v
}

/// Linear-space recursion on `V` directly; overflows for large costs.
pub fn backward_pass_linear(net: &TaskChainNetwork, prices_t: &[f64], scale: f64) -> Vec<Vec<f64>> {
    let nn = net.n_tasks + 2;
    let kk = net.layers.len();
    let mut v = vec![vec![0.0; nn]; kk + 1];
    v[kk][Node::Dest.id(net.n_tasks)] = 1.0;
    for k in (0..kk).rev() {
        for e in &net.layers[k] {
            let w = crate::choice::driver_edge_kernel(e.cost, edge_price(e, prices_t), scale);
            v[k][e.from.id(net.n_tasks)] += w * v[k + 1][e.to.id(net.n_tasks)];
        }
    }
    v
}

/// Pushes `inflow` units from the origin through the network. With
/// `fixed_opt_out` the (o,d) edge carries that mass instead of its logit share
/// and `inflow` is spread over the remaining edges.
pub fn forward_pass(
    net: &TaskChainNetwork,
    prices_t: &[f64],
    scale: f64,
    log_v: &[Vec<f64>],
    inflow: f64,
    fixed_opt_out: Option<f64>,
    truncate_below: f64,
) -> Vec<Vec<f64>> {
    let nn = net.n_tasks + 2;
    let mut mass = vec![0.0; nn];
    mass[Node::Origin.id(net.n_tasks)] = inflow;
    let mut x = Vec::with_capacity(net.layers.len());
    for (k, layer) in net.layers.iter().enumerate() {
        let mut next = vec![0.0; nn];
        let mut xk = vec![0.0; layer.len()];
        for (ei, e) in layer.iter().enumerate() {
            if k == 0 && e.to == Node::Dest {
                if let Some(f) = fixed_opt_out {
                    let f = if f < truncate_below { 0.0 } else { f };
                    xk[ei] = f;
                    next[e.to.id(net.n_tasks)] += f;
                    continue;
                }
            }
            let from = e.from.id(net.n_tasks);
            let m = mass[from];
            if m == 0.0 {
                continue;
            }
            let to = e.to.id(net.n_tasks);
            let lp = edge_term(e.cost, edge_price(e, prices_t), scale) + log_v[k + 1][to]
                - log_v[k][from];
            let mut f = m * lp.exp();
            if f < truncate_below {
                f = 0.0;
            }
            xk[ei] = f;
            next[to] += f;
        }
        x.push(xk);
        mass = next;
    }
    x
}

fn to_pi(log_v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    log_v
        .iter()
        .map(|row| row.iter().map(|&l| -l / scale).collect())
        .collect()
}

/// Loads one driver group of `population` onto `net` at window prices `prices_t`.
pub fn load_group(
    net: &TaskChainNetwork,
    prices_t: &[f64],
    spec: &ModelSpec,
    population: f64,
) -> LoadingResult {
    let cut = FLOW_TRUNCATION * population;
    let o = Node::Origin.id(net.n_tasks);
    match spec.kind() {
        ModelKind::Mnl => {
            let log_v = backward_pass(net, prices_t, spec.phi, false);
            let x = forward_pass(net, prices_t, spec.phi, &log_v, population, None, cut);
            let pi = to_pi(&log_v, spec.phi);
            LoadingResult {
                source_surplus: pi[0][o],
                log_v,
                pi,
                x,
                nest_surplus: None,
                population,
            }
        }
        ModelKind::Nl => {
            // Opt-out versus participation first, then participants on the
            // network without (o,d) at the within-nest scale.
            let log_v = backward_pass(net, prices_t, spec.phi_hat, true);
            let nest = -log_v[0][o] / spec.phi_hat;
            let (surplus, f_out, f_in) = participation_split(0.0, nest, spec.phi, population);
            let x = forward_pass(net, prices_t, spec.phi_hat, &log_v, f_in, Some(f_out), cut);
            let mut pi = to_pi(&log_v, spec.phi_hat);
            pi[0][o] = surplus;
            LoadingResult {
                source_surplus: surplus,
                log_v,
                pi,
                x,
                nest_surplus: Some(nest),
                population,
            }
        }
    }
}

/// One network per driver OD pair.
pub fn build_networks(inst: &Instance) -> Vec<TaskChainNetwork> {
    (0..inst.n_od())
        .into_par_iter()
        .map(|w| build_network(inst, w))
        .collect()
}

/// Loads every driver group, in `driver_groups` order.
pub fn load_drivers(
    inst: &Instance,
    nets: &[TaskChainNetwork],
    prices: &PriceVector,
    spec: &ModelSpec,
) -> Vec<LoadingResult> {
    inst.driver_groups
        .par_iter()
        .enumerate()
        .map(|(g, grp)| {
            load_group(
                &nets[grp.w],
                prices.window(grp.t),
                spec,
                inst.driver_population(g),
            )
        })
        .collect()
}

/// Total traversals into each task node.
pub fn task_inflow(net: &TaskChainNetwork, res: &LoadingResult) -> Vec<f64> {
    let mut out = vec![0.0; net.n_tasks];
    for (layer, xk) in net.layers.iter().zip(&res.x) {
        for (e, &f) in layer.iter().zip(xk) {
            if let Node::Task(j) = e.to {
                out[j] += f;
            }
        }
    }
    out
}

/// Flow on each enumerated path, reconstructed as a product of conditional
/// edge-choice probabilities recovered from the edge flows.
pub fn path_flows(net: &TaskChainNetwork, res: &LoadingResult, paths: &[Path]) -> Vec<f64> {
    let nn = net.n_tasks + 2;
    // Outflow per state, per layer.
    let out: Vec<Vec<f64>> = net
        .layers
        .iter()
        .zip(&res.x)
        .map(|(layer, xk)| {
            let mut o = vec![0.0; nn];
            for (e, &f) in layer.iter().zip(xk) {
                o[e.from.id(net.n_tasks)] += f;
            }
            o
        })
        .collect();
    paths
        .iter()
        .map(|p| {
            let mut f = res.population;
            for (k, &ei) in p.edges.iter().enumerate() {
                let e = &net.layers[k][ei];
                let total = out[k][e.from.id(net.n_tasks)];
                if total <= 0.0 {
                    return 0.0;
                }
                f *= res.x[k][ei] / total;
            }
            f
        })
        .collect()
}

/// Driver perturbation (conditional entropy of the Markov edge choices).
pub fn driver_entropy(net: &TaskChainNetwork, res: &LoadingResult, spec: &ModelSpec) -> f64 {
    let nn = net.n_tasks + 2;
    let nl = spec.kind() == ModelKind::Nl;
    let od = net.opt_out_edge();
    let mut h = 0.0;
    for (k, (layer, xk)) in net.layers.iter().zip(&res.x).enumerate() {
        let mut out = vec![0.0; nn];
        for (ei, (e, &f)) in layer.iter().zip(xk).enumerate() {
            if nl && k == 0 && Some(ei) == od {
                continue;
            }
            out[e.from.id(net.n_tasks)] += f;
        }
        for (ei, (e, &f)) in layer.iter().zip(xk).enumerate() {
            if f <= 0.0 || (nl && k == 0 && Some(ei) == od) {
                continue;
            }
            h += f * (f / out[e.from.id(net.n_tasks)]).ln();
        }
    }
    if nl {
        let n = res.population;
        let f_out = od.map_or(0.0, |e| res.x[0][e]);
        let f_in: f64 = res.x[0]
            .iter()
            .enumerate()
            .filter(|(e, _)| Some(*e) != od)
            .map(|(_, f)| f)
            .sum();
        let xl = |v: f64| if v > 0.0 { v * (v / n).ln() } else { 0.0 };
        -(xl(f_out) + xl(f_in)) / spec.phi - h / spec.phi_hat
    } else {
        -h / spec.phi
    }
}

/// Deterministic cost of the loaded flows, net of no prices.
pub fn driver_flow_cost(net: &TaskChainNetwork, res: &LoadingResult) -> f64 {
    net.layers
        .iter()
        .zip(&res.x)
        .flat_map(|(layer, xk)| layer.iter().zip(xk).map(|(e, f)| e.cost * f))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scales;
    use crate::taskchain::{enumerate_paths, num_edge_types, TaskChainNetwork};
    use rand::{Rng, SeedableRng};

    fn random_net(seed: u64, nj: usize, k: usize) -> (TaskChainNetwork, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c: Vec<f64> = (0..num_edge_types(nj))
            .map(|_| rng.gen_range(-2.0..6.0))
            .collect();
        c[nj] = 0.0;
        *c.last_mut().unwrap() = 0.0;
        let p = (0..nj).map(|_| rng.gen_range(0.0..3.0)).collect();
        (TaskChainNetwork::from_type_costs(nj, k, c), p)
    }

    fn path_cost(net: &TaskChainNetwork, p: &crate::taskchain::Path, prices: &[f64]) -> f64 {
        p.edges
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                let e = &net.layers[k][e];
                e.cost - e.reward_task.map_or(0.0, |j| prices[j])
            })
            .sum()
    }

    #[test]
    fn empty_task_set_has_zero_surplus() {
        let net = TaskChainNetwork::from_type_costs(0, 2, vec![0.0; num_edge_types(0)]);
        let r = load_group(&net, &[], &Scales::mnl(1.0, 1.3), 8.0);
        assert_eq!(r.source_surplus, 0.0);
        assert_eq!(r.x[0][0], 8.0);
    }

    #[test]
    fn two_path_closed_form() {
        let mut c = vec![0.0; num_edge_types(1)];
        c[0] = 1.5; // o -> j
        c[3] = -0.7; // j -> d
        let net = TaskChainNetwork::from_type_costs(1, 1, c);
        let phi = 0.8;
        let r = load_group(&net, &[0.0], &Scales::mnl(1.0, phi), 1.0);
        let want = -(1.0 + (-phi * (1.5 - 0.7f64)).exp()).ln() / phi;
        assert!((r.source_surplus - want).abs() < 1e-14);
    }

    #[test]
    fn values_at_destination_are_one() {
        let (net, p) = random_net(1, 3, 3);
        let lv = backward_pass(&net, &p, 1.2, false);
        for k in 1..lv.len() {
            assert_eq!(lv[k][3], 0.0);
        }
    }

    #[test]
    fn matches_path_enumeration() {
        for seed in 0..10 {
            let (net, p) = random_net(seed, 3, 2);
            let spec = Scales::mnl(1.0, 0.9);
            let n = 17.0;
            let r = load_group(&net, &p, &spec, n);
            let paths = enumerate_paths(&net).unwrap();
            let costs: Vec<f64> = paths.iter().map(|q| path_cost(&net, q, &p)).collect();
            let want = crate::choice::logit_surplus(&costs, spec.phi);
            assert!((r.source_surplus - want).abs() <= 1e-10 * want.abs().max(1.0));
            let probs = crate::choice::logit_shares(&costs, spec.phi, n);
            for (f, w) in path_flows(&net, &r, &paths).iter().zip(&probs) {
                assert!((f - w).abs() <= 1e-10 * w.max(1e-300).max(1.0));
            }
        }
    }

    #[test]
    fn conserves_mass() {
        let (net, p) = random_net(4, 4, 3);
        let n = 123.0;
        let r = load_group(&net, &p, &Scales::mnl(1.0, 1.0), n);
        let first: f64 = r.x[0].iter().sum();
        let last: f64 = r.x.last().unwrap().iter().sum();
        assert!((first - n).abs() < 1e-9 * n);
        assert!((last - n).abs() < 1e-9 * n);
        for k in 0..net.layers.len() - 1 {
            let mut inflow = vec![0.0; net.n_tasks + 2];
            for (e, f) in net.layers[k].iter().zip(&r.x[k]) {
                inflow[e.to.id(net.n_tasks)] += f;
            }
            let mut outflow = vec![0.0; net.n_tasks + 2];
            for (e, f) in net.layers[k + 1].iter().zip(&r.x[k + 1]) {
                outflow[e.from.id(net.n_tasks)] += f;
            }
            for (a, b) in inflow.iter().zip(&outflow) {
                assert!((a - b).abs() < 1e-9 * n);
            }
        }
    }

    #[test]
    fn log_and_linear_agree() {
        let (net, p) = random_net(9, 3, 3);
        let lv = backward_pass(&net, &p, 0.7, false);
        let v = backward_pass_linear(&net, &p, 0.7);
        for (a, b) in lv.iter().flatten().zip(v.iter().flatten()) {
            if *b > 0.0 {
                assert!((a.exp() - b).abs() <= 1e-9 * b);
            } else {
                assert_eq!(*a, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn log_space_survives_large_costs() {
        let mut c = vec![900.0; num_edge_types(2)];
        c[2] = 0.0;
        *c.last_mut().unwrap() = 0.0;
        let net = TaskChainNetwork::from_type_costs(2, 2, c);
        let r = load_group(&net, &[0.0, 0.0], &Scales::mnl(1.0, 1.0), 1.0);
        assert!(r.source_surplus.is_finite());
        assert!(r.x.iter().flatten().all(|f| f.is_finite()));
    }

    #[test]
    fn nl_with_equal_scales_collapses() {
        for seed in 0..5 {
            let (net, p) = random_net(seed, 3, 2);
            let a = load_group(&net, &p, &Scales::mnl(1.0, 0.6), 40.0);
            let b = load_group(&net, &p, &Scales::nl(1.0, 1.0, 0.6, 0.6), 40.0);
            assert!(
                (a.source_surplus - b.source_surplus).abs()
                    < 1e-12 * a.source_surplus.abs().max(1.0)
            );
            for (x, y) in a.x.iter().flatten().zip(b.x.iter().flatten()) {
                assert!((x - y).abs() < 1e-12 * 40.0, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn surplus_gradient_is_negative_inflow() {
        for spec in [Scales::mnl(1.0, 0.9), Scales::nl(1.0, 1.0, 0.5, 1.4)] {
            let (net, p) = random_net(2, 3, 2);
            let n = 10.0;
            let r = load_group(&net, &p, &spec, n);
            let inflow = task_inflow(&net, &r);
            for j in 0..3 {
                let h = 1e-5;
                let mut up = p.clone();
                let mut dn = p.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = n
                    * (load_group(&net, &up, &spec, n).source_surplus
                        - load_group(&net, &dn, &spec, n).source_surplus)
                    / (2.0 * h);
                assert!(
                    (fd + inflow[j]).abs() <= 1e-6 * inflow[j].max(1.0),
                    "{fd} vs {}",
                    inflow[j]
                );
            }
        }
    }

    #[test]
    fn entropy_satisfies_fenchel_equality() {
        // N pi = sum (c - p) x - H at the loaded flows.
        for spec in [Scales::mnl(1.0, 0.8), Scales::nl(1.0, 1.0, 0.5, 1.2)] {
            let (net, p) = random_net(6, 3, 3);
            let n = 9.0;
            let r = load_group(&net, &p, &spec, n);
            let inflow = task_inflow(&net, &r);
            let priced =
                driver_flow_cost(&net, &r) - inflow.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
            let lhs = priced - driver_entropy(&net, &r, &spec);
            assert!(
                (lhs - n * r.source_surplus).abs() < 1e-10 * (n * r.source_surplus).abs().max(1.0)
            );
        }
    }

    #[test]
    fn higher_uniform_prices_draw_more_task_flow() {
        let (net, _) = random_net(8, 3, 2);
        let spec = Scales::mnl(1.0, 1.0);
        let lo = task_inflow(&net, &load_group(&net, &[0.0; 3], &spec, 50.0));
        let hi = task_inflow(&net, &load_group(&net, &[0.5; 3], &spec, 50.0));
        assert!(hi.iter().sum::<f64>() >= lo.iter().sum::<f64>());
    }
}
