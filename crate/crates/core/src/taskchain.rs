//! Layered task-chain network: every source-to-sink path is a task bundle.
//!
//! Node ids: tasks are `0..J`, the destination is `J` and the origin `J + 1`.
//! Edge layer `k` runs from stage `k` to stage `k + 1`; stage 0 holds only the
//! origin and stage `K + 1` only the destination.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Instance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Origin,
    Task(usize),
    Dest,
}

impl Node {
    pub fn id(self, n_tasks: usize) -> usize {
        match self {
            Node::Task(j) => j,
            Node::Dest => n_tasks,
            Node::Origin => n_tasks + 1,
        }
    }

    fn label(self) -> String {
        match self {
            Node::Origin => "o".into(),
            Node::Dest => "d".into(),
            Node::Task(j) => j.to_string(),
        }
    }
}

/// Number of distinct edge types: (o,j), (o,d), (i,j), (j,d), (d,d).
pub fn num_edge_types(n_tasks: usize) -> usize {
    n_tasks * n_tasks + 2 * n_tasks + 2
}

/// Index of the edge type `from -> to`; panics on a pair that is not an edge.
pub fn edge_type(n_tasks: usize, from: Node, to: Node) -> usize {
    let j = n_tasks;
    match (from, to) {
        (Node::Origin, Node::Task(b)) => b,
        (Node::Origin, Node::Dest) => j,
        (Node::Task(a), Node::Task(b)) => j + 1 + a * j + b,
        (Node::Task(a), Node::Dest) => j + 1 + j * j + a,
        (Node::Dest, Node::Dest) => 2 * j + 1 + j * j,
        _ => panic!("{from:?} -> {to:?} is not a task-chain edge"),
    }
}

pub fn edge_type_ends(n_tasks: usize, e: usize) -> (Node, Node) {
    let j = n_tasks;
    if e < j {
        (Node::Origin, Node::Task(e))
    } else if e == j {
        (Node::Origin, Node::Dest)
    } else if e < j + 1 + j * j {
        let r = e - j - 1;
        (Node::Task(r / j), Node::Task(r % j))
    } else if e < 2 * j + 1 + j * j {
        (Node::Task(e - j - 1 - j * j), Node::Dest)
    } else {
        assert_eq!(e, 2 * j + 1 + j * j, "edge type out of range");
        (Node::Dest, Node::Dest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEdge {
    pub etype: usize,
    pub from: Node,
    pub to: Node,
    /// Deterministic cost `c^D`.
    pub cost: f64,
    /// Task whose price is subtracted when traversing this edge.
    pub reward_task: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskChainNetwork {
    pub n_tasks: usize,
    pub k_max: usize,
    /// Deterministic cost per edge type.
    pub type_cost: Vec<f64>,
    /// `layers[k]` holds the edges from stage `k` to stage `k + 1`.
    pub layers: Vec<Vec<LayerEdge>>,
}

/// Geometry needed to cost the network for one driver OD pair.
pub struct Geometry<'a> {
    pub tt: &'a dyn Fn(usize, usize) -> f64,
    pub origin: usize,
    pub dest: usize,
    pub tasks: &'a [[usize; 2]],
}

pub fn type_costs(g: &Geometry<'_>) -> Vec<f64> {
    let nj = g.tasks.len();
    let tt = g.tt;
    let mut c = vec![0.0; num_edge_types(nj)];
    let base = tt(g.origin, g.dest);
    for (b, tb) in g.tasks.iter().enumerate() {
        let serve = tt(tb[0], tb[1]);
        c[edge_type(nj, Node::Origin, Node::Task(b))] = tt(g.origin, tb[0]) + serve;
        c[edge_type(nj, Node::Task(b), Node::Dest)] = tt(tb[1], g.dest) - base;
        for (a, ta) in g.tasks.iter().enumerate() {
            c[edge_type(nj, Node::Task(a), Node::Task(b))] = tt(ta[1], tb[0]) + serve;
        }
    }
    c
}

impl TaskChainNetwork {
    pub fn from_type_costs(n_tasks: usize, k_max: usize, type_cost: Vec<f64>) -> Self {
        assert!(k_max >= 1);
        assert_eq!(type_cost.len(), num_edge_types(n_tasks));
        let edge = |from: Node, to: Node| {
            let etype = edge_type(n_tasks, from, to);
            LayerEdge {
                etype,
                from,
                to,
                cost: type_cost[etype],
                reward_task: match to {
                    Node::Task(j) => Some(j),
                    _ => None,
                },
            }
        };
        let tasks = || (0..n_tasks).map(Node::Task);
        let mut layers = Vec::with_capacity(k_max + 1);
        layers.push(
            tasks()
                .chain([Node::Dest])
                .map(|to| edge(Node::Origin, to))
                .collect(),
        );
        for _ in 1..k_max {
            let mut layer = Vec::new();
            for from in tasks() {
                for to in tasks().chain([Node::Dest]) {
                    layer.push(edge(from, to));
                }
            }
            layer.push(edge(Node::Dest, Node::Dest));
            layers.push(layer);
        }
        let mut last: Vec<LayerEdge> = tasks().map(|from| edge(from, Node::Dest)).collect();
        last.push(edge(Node::Dest, Node::Dest));
        layers.push(last);
        Self {
            n_tasks,
            k_max,
            type_cost,
            layers,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Index of the opt-out edge (o,d) within layer 0, if present.
    pub fn opt_out_edge(&self) -> Option<usize> {
        self.layers[0].iter().position(|e| e.to == Node::Dest)
    }

    /// Same network with the opt-out edge removed (participants only).
    pub fn without_opt_out(&self) -> Self {
        let mut out = self.clone();
        out.layers[0].retain(|e| e.to != Node::Dest);
        out
    }

    /// Edge list CSV `k,i,j,cost,reward_task`.
    pub fn dump_csv(&self) -> String {
        let mut s = String::from("k,i,j,cost,reward_task\n");
        for (k, layer) in self.layers.iter().enumerate() {
            for e in layer {
                let rt = e.reward_task.map(|j| j.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{k},{},{},{},{rt}", e.from.label(), e.to.label(), e.cost);
            }
        }
        s
    }
}

/// Network for driver OD pair `w`. Costs do not depend on the window.
pub fn build_network(inst: &Instance, w: usize) -> TaskChainNetwork {
    let [o, d] = inst.driver_od_pairs[w];
    let tt = |a: usize, b: usize| inst.tt(a, b);
    let geo = Geometry {
        tt: &tt,
        origin: o,
        dest: d,
        tasks: &inst.task_pairs,
    };
    TaskChainNetwork::from_type_costs(inst.n_tasks(), inst.k_max, type_costs(&geo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Position of the traversed edge within each layer.
    pub edges: Vec<usize>,
    /// Edge types, one per layer.
    pub types: Vec<usize>,
    /// Deterministic cost.
    pub cost: f64,
    /// Tasks in visiting order.
    pub bundle: Vec<usize>,
}

impl Path {
    /// Number of times task `j` is visited.
    pub fn visits(&self, j: usize) -> usize {
        self.bundle.iter().filter(|&&b| b == j).count()
    }
}

pub const PATH_GUARD: f64 = 1e6;

/// Every source-to-sink path, opt-out first. Small networks only.
pub fn enumerate_paths(net: &TaskChainNetwork) -> Result<Vec<Path>> {
    let size = (net.n_tasks as f64 + 1.0).powi(net.k_max as i32 + 1);
    if size > PATH_GUARD {
        return Err(Error::Guard {
            what: "path enumeration (|J|+1)^(K+1)",
            size,
            limit: PATH_GUARD,
        });
    }
    let mut out = Vec::new();
    let mut stack = Vec::new();
    walk(net, 0, Node::Origin, &mut stack, &mut out);
    // The opt-out path is found last under the layer ordering; put it first.
    out.sort_by_key(|p| p.bundle.len());
    Ok(out)
}

fn walk(net: &TaskChainNetwork, k: usize, at: Node, stack: &mut Vec<usize>, out: &mut Vec<Path>) {
    if k == net.layers.len() {
        let types: Vec<usize> = stack
            .iter()
            .enumerate()
            .map(|(k, &e)| net.layers[k][e].etype)
            .collect();
        let cost = stack
            .iter()
            .enumerate()
            .map(|(k, &e)| net.layers[k][e].cost)
            .sum();
        let bundle = stack
            .iter()
            .enumerate()
            .filter_map(|(k, &e)| net.layers[k][e].reward_task)
            .collect();
        out.push(Path {
            edges: stack.clone(),
            types,
            cost,
            bundle,
        });
        return;
    }
    for (i, e) in net.layers[k].iter().enumerate() {
        if e.from == at {
            stack.push(i);
            walk(net, k + 1, e.to, stack, out);
            stack.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_geometry() -> (Vec<Vec<f64>>, Vec<[usize; 2]>) {
        // Zones 0..4 on a line with unit hops: o=0, j+=1, j-=2, d=3.
        let tt: Vec<Vec<f64>> = (0..4)
            .map(|a: i32| (0..4).map(|b: i32| (a - b).abs() as f64).collect())
            .collect();
        (tt, vec![[1, 2]])
    }

    #[test]
    fn edge_type_indexing_round_trips() {
        for nj in 0..5 {
            for e in 0..num_edge_types(nj) {
                let (a, b) = edge_type_ends(nj, e);
                assert_eq!(edge_type(nj, a, b), e);
            }
        }
    }

    #[test]
    fn degenerate_geometry_has_zero_costs() {
        let tt = |_: usize, _: usize| 0.0;
        let tasks = [[0, 0]];
        let geo = Geometry {
            tt: &tt,
            origin: 0,
            dest: 0,
            tasks: &tasks,
        };
        let c = type_costs(&geo);
        assert_eq!(c[edge_type(1, Node::Origin, Node::Task(0))], 0.0);
        assert_eq!(c[edge_type(1, Node::Task(0), Node::Dest)], 0.0);
    }

    #[test]
    fn collinear_task_has_zero_detour() {
        let (m, tasks) = line_geometry();
        let tt = |a: usize, b: usize| m[a][b];
        let geo = Geometry {
            tt: &tt,
            origin: 0,
            dest: 3,
            tasks: &tasks,
        };
        let net = TaskChainNetwork::from_type_costs(1, 1, type_costs(&geo));
        let paths = enumerate_paths(&net).unwrap();
        let p = paths.iter().find(|p| p.bundle == vec![0]).unwrap();
        assert_eq!(p.cost, 0.0);
    }

    #[test]
    fn layered_edge_count_k2_j2() {
        let net = TaskChainNetwork::from_type_costs(2, 2, vec![0.0; num_edge_types(2)]);
        assert_eq!(net.layers[0].len(), 3);
        assert_eq!(net.layers[1].len(), 7);
        assert_eq!(net.layers[2].len(), 3);
        assert_eq!(net.num_edges(), 13);
        assert_eq!(num_edge_types(2), 10);
        // Brute force: edges (k, i, j) admissible under the layering rules.
        let mut count = 0;
        let nodes = [Node::Origin, Node::Task(0), Node::Task(1), Node::Dest];
        for k in 0..3 {
            for &a in &nodes {
                for &b in &nodes {
                    let from_ok = (k == 0) == (a == Node::Origin);
                    let to_ok = b != Node::Origin && (k < 2 || b == Node::Dest);
                    let d_ok = a != Node::Dest || b == Node::Dest;
                    if from_ok && to_ok && d_ok {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 13);
    }

    #[test]
    fn path_counts() {
        let net = TaskChainNetwork::from_type_costs(0, 2, vec![0.0; num_edge_types(0)]);
        let p = enumerate_paths(&net).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].bundle.is_empty());

        let net = TaskChainNetwork::from_type_costs(1, 1, vec![0.0; num_edge_types(1)]);
        assert_eq!(enumerate_paths(&net).unwrap().len(), 2);

        let net = TaskChainNetwork::from_type_costs(2, 2, vec![0.0; num_edge_types(2)]);
        let mut bundles: Vec<Vec<usize>> = enumerate_paths(&net)
            .unwrap()
            .into_iter()
            .map(|p| p.bundle)
            .collect();
        bundles.sort();
        assert_eq!(
            bundles,
            vec![
                vec![],
                vec![0],
                vec![0, 0],
                vec![0, 1],
                vec![1],
                vec![1, 0],
                vec![1, 1]
            ]
        );
    }

    #[test]
    fn guard_refuses_large_enumeration() {
        let net = TaskChainNetwork::from_type_costs(30, 4, vec![0.0; num_edge_types(30)]);
        assert!(matches!(enumerate_paths(&net), Err(Error::Guard { .. })));
    }

    #[test]
    fn path_cost_equals_direct_detour() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let nz = 7;
        let pts: Vec<(f64, f64)> = (0..nz)
            .map(|_| (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let m: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| {
                pts.iter()
                    .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .collect()
            })
            .collect();
        let tasks = vec![[1, 2], [3, 4], [5, 1]];
        let tt = |a: usize, b: usize| m[a][b];
        let geo = Geometry {
            tt: &tt,
            origin: 0,
            dest: 6,
            tasks: &tasks,
        };
        let net = TaskChainNetwork::from_type_costs(3, 3, type_costs(&geo));
        for p in enumerate_paths(&net).unwrap() {
            let mut at = 0;
            let mut direct = 0.0;
            for &j in &p.bundle {
                direct += m[at][tasks[j][0]] + m[tasks[j][0]][tasks[j][1]];
                at = tasks[j][1];
            }
            direct += m[at][6] - m[0][6];
            if p.bundle.is_empty() {
                direct = 0.0;
            }
            assert!((p.cost - direct).abs() < 1e-12, "{:?}", p.bundle);
            // Once at d the path stays there.
            let first_d = p
                .edges
                .iter()
                .enumerate()
                .position(|(k, &e)| net.layers[k][e].to == Node::Dest)
                .unwrap();
            for k in first_d + 1..net.layers.len() {
                assert_eq!(net.layers[k][p.edges[k]].from, Node::Dest);
            }
        }
    }

    #[test]
    fn dump_lists_every_edge() {
        let net = TaskChainNetwork::from_type_costs(2, 2, vec![1.5; num_edge_types(2)]);
        let csv = net.dump_csv();
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.contains("0,o,d,1.5,\n"));
        assert!(csv.contains("1,0,1,1.5,1\n"));
    }
}
