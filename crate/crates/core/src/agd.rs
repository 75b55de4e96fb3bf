//! Dual master problem: maximize the concave dual objective
//! `G(p) = sum_j N_j Pi_j(p) + sum_g N_g pi_g(p)` over `p >= 0` with FISTA,
//! projection onto the nonnegative orthant and adaptive restart.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{
    shipper_costs, shipper_demand_from_costs, shipper_entropy, shipper_surplus_from_costs,
    ModelSpec,
};
use crate::error::{Error, Result};
use crate::model::{Instance, PriceVector};
use crate::mta::{
    build_networks, driver_entropy, driver_flow_cost, load_group, task_inflow, LoadingResult,
};
use crate::taskchain::TaskChainNetwork;

/// An instance with its task-chain networks built once.
pub struct Market<'a> {
    pub inst: &'a Instance,
    pub spec: ModelSpec,
    pub nets: Vec<TaskChainNetwork>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub g: f64,
    /// Excess demand, indexed like `PriceVector::p`.
    pub grad: Vec<f64>,
    /// Shipper demand `y[j][t]`, `t` in `0..=T`.
    pub y: Vec<Vec<f64>>,
    pub shipper_surplus: Vec<f64>,
    pub loads: Vec<LoadingResult>,
}

impl<'a> Market<'a> {
    pub fn new(inst: &'a Instance) -> Self {
        Self::with_spec(inst, inst.scales)
    }

    pub fn with_spec(inst: &'a Instance, spec: ModelSpec) -> Self {
        Self {
            inst,
            spec,
            nets: build_networks(inst),
        }
    }

    pub fn zero_prices(&self) -> PriceVector {
        PriceVector::zeros(self.inst.n_windows, self.inst.n_tasks())
    }

    pub fn evaluate(&self, prices: &PriceVector) -> Evaluation {
        let inst = self.inst;
        let spec = &self.spec;
        let (nt, nj) = (inst.n_windows, inst.n_tasks());
        let mut g = 0.0;
        let mut grad = vec![0.0; nt * nj];
        let mut y = Vec::with_capacity(nj);
        let mut shipper_surplus = Vec::with_capacity(nj);
        for j in 0..nj {
            let costs = shipper_costs(inst, j, prices);
            let n = inst.shipper_population(j);
            let s = shipper_surplus_from_costs(&costs, spec);
            let yj = shipper_demand_from_costs(&costs, n, spec);
            g += n * s;
            for t in 1..=nt {
                grad[prices.idx(t, j)] += yj[t];
            }
            shipper_surplus.push(s);
            y.push(yj);
        }
        let loads: Vec<LoadingResult> = inst
            .driver_groups
            .par_iter()
            .enumerate()
            .map(|(gi, grp)| {
                load_group(
                    &self.nets[grp.w],
                    prices.window(grp.t),
                    spec,
                    inst.driver_population(gi),
                )
            })
            .collect();
        for (grp, res) in inst.driver_groups.iter().zip(&loads) {
            g += res.population * res.source_surplus;
            for (j, f) in task_inflow(&self.nets[grp.w], res).into_iter().enumerate() {
                grad[prices.idx(grp.t, j)] -= f;
            }
        }
        Evaluation {
            g,
            grad,
            y,
            shipper_surplus,
            loads,
        }
    }

    pub fn dual_objective(&self, prices: &PriceVector) -> f64 {
        self.evaluate(prices).g
    }

    pub fn gradient(&self, prices: &PriceVector) -> Vec<f64> {
        self.evaluate(prices).grad
    }

    /// Primal master objective at `(y, x)`: deterministic costs minus the
    /// perturbation terms. Equals `G` when the market clears.
    pub fn primal_objective(&self, y: &[Vec<f64>], loads: &[LoadingResult]) -> Result<f64> {
        let inst = self.inst;
        let mut z = 0.0;
        for (j, yj) in y.iter().enumerate() {
            let c = &inst.det_costs.shipper[j];
            z += yj.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            z -= shipper_entropy(yj, inst.shipper_population(j), &self.spec)?;
        }
        for (grp, res) in inst.driver_groups.iter().zip(loads) {
            let net = &self.nets[grp.w];
            z += driver_flow_cost(net, res) - driver_entropy(net, res, &self.spec);
        }
        Ok(z)
    }

    /// Step size from a curvature bound of the dual objective.
    pub fn default_step(&self) -> f64 {
        let inst = self.inst;
        let max_ship = (0..inst.n_tasks())
            .map(|j| inst.shipper_population(j))
            .fold(0.0, f64::max);
        let mut per_window = vec![0.0; inst.n_windows + 1];
        for (g, grp) in inst.driver_groups.iter().enumerate() {
            per_window[grp.t] += inst.driver_population(g);
        }
        let max_drv = per_window.into_iter().fold(0.0, f64::max);
        let l = self.spec.theta_hat * max_ship + self.spec.phi_hat * max_drv;
        if l > 0.0 {
            1.0 / l
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Fixed step; `None` uses `Market::default_step`.
    pub step_size: Option<f64>,
    pub max_iter: usize,
    pub tol_gradient: f64,
    pub tol_price_rel: f64,
    pub tol_obj_rel: f64,
    pub restart: bool,
    /// Halve the step until the quadratic ascent bound holds.
    pub backtracking: bool,
    /// Consecutive objective decreases tolerated before giving up.
    pub divergence_window: usize,
    pub initial_prices: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            max_iter: 1000,
            tol_gradient: 0.1,
            tol_price_rel: 1e-4,
            tol_obj_rel: 1e-6,
            restart: true,
            backtracking: true,
            divergence_window: 50,
            initial_prices: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub g: f64,
    pub max_grad: f64,
    pub step_norm: f64,
    pub restart: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
    pub final_step: f64,
}

impl SolverTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,G,max_grad,restart\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{}",
                r.iter, r.g, r.max_grad, r.restart as u8
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct FluidSolution {
    pub prices: PriceVector,
    pub y: Vec<Vec<f64>>,
    pub loads: Vec<LoadingResult>,
    pub shipper_surplus: Vec<f64>,
    pub dual_objective: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FluidSolution {
    pub fn max_projected_gradient(&self) -> f64 {
        projected_max(&self.prices.p, &self.grad)
    }
}

/// Largest gradient entry not blocked by the `p >= 0` constraint.
pub fn projected_max(p: &[f64], grad: &[f64]) -> f64 {
    p.iter()
        .zip(grad)
        .map(|(&pi, &gi)| if pi > 0.0 { gi.abs() } else { gi.max(0.0) })
        .fold(0.0, f64::max)
}

fn project_step(z: &[f64], grad: &[f64], gamma: f64) -> Vec<f64> {
    z.iter()
        .zip(grad)
        .map(|(a, g)| (a + gamma * g).max(0.0))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Projected gradient step from `z` with optional backtracking.
fn ascent_step(
    market: &Market<'_>,
    z: &[f64],
    ev_z: &Evaluation,
    gamma: &mut f64,
    cfg: &SolverConfig,
) -> (Vec<f64>, Evaluation) {
    let (nt, nj) = (market.inst.n_windows, market.inst.n_tasks());
    loop {
        let p = project_step(z, &ev_z.grad, *gamma);
        let ev = market.evaluate(&PriceVector::from_vec(nt, nj, p.clone()));
        if !cfg.backtracking {
            return (p, ev);
        }
        let d = diff(&p, z);
        let bound = ev_z.g + dot(&ev_z.grad, &d) - dot(&d, &d) / (2.0 * *gamma);
        if ev.g >= bound - 1e-12 * ev_z.g.abs().max(1.0) || *gamma < 1e-12 {
            return (p, ev);
        }
        *gamma *= 0.5;
    }
}

pub fn solve_master(
    market: &Market<'_>,
    cfg: &SolverConfig,
) -> Result<(FluidSolution, SolverTrace)> {
    let wall = std::time::Instant::now();
    let cpu0 = crate::cputime::process_seconds();
    let inst = market.inst;
    let (nt, nj) = (inst.n_windows, inst.n_tasks());
    let mut p: Vec<f64> = match &cfg.initial_prices {
        Some(v) => v.iter().map(|x| x.max(0.0)).collect(),
        None => vec![0.0; nt * nj],
    };
    let mut ev_p = market.evaluate(&PriceVector::from_vec(nt, nj, p.clone()));
    let mut trace = SolverTrace::default();
    let mut gamma = cfg.step_size.unwrap_or_else(|| market.default_step());
    trace.rows.push(TraceRow {
        iter: 0,
        g: ev_p.g,
        max_grad: projected_max(&p, &ev_p.grad),
        step_norm: 0.0,
        restart: false,
    });
    let mut converged = p.is_empty();
    let mut z = p.clone();
    let mut ev_z = ev_p.clone();
    let mut tau = 1.0f64;
    let mut falling = 0usize;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let (mut p_new, mut ev_new) = ascent_step(market, &z, &ev_z, &mut gamma, cfg);
        let slack = 1e-12 * ev_p.g.abs().max(1.0);
        let mut restarted = false;
        if ev_new.g < ev_p.g - slack && z != p {
            // Momentum overshot: restart from the last accepted point.
            restarted = true;
            tau = 1.0;
            z = p.clone();
            ev_z = ev_p.clone();
            let (a, b) = ascent_step(market, &z, &ev_z, &mut gamma, cfg);
            p_new = a;
            ev_new = b;
        }
        if ev_new.g < ev_p.g - slack {
            falling += 1;
            if falling >= cfg.divergence_window {
                return Err(Error::Divergence(falling));
            }
        } else {
            falling = 0;
        }

        let step = diff(&p_new, &p);
        let step_norm = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = p_new.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let max_grad = projected_max(&p_new, &ev_new.grad);
        let obj_rel = (ev_new.g - ev_p.g).abs() / ev_new.g.abs().max(1.0);
        converged = max_grad < cfg.tol_gradient
            && step_norm / scale < cfg.tol_price_rel
            && obj_rel < cfg.tol_obj_rel;

        // Gradient-mapping restart: the step opposes the last move.
        let mapping = diff(&p_new, &z);
        if cfg.restart && !restarted && dot(&mapping, &step) < 0.0 {
            restarted = true;
        }
        if restarted {
            tau = 1.0;
            z = p_new.clone();
            ev_z = ev_new.clone();
        } else {
            let tau_next = (1.0 + (1.0 + 4.0 * tau * tau).sqrt()) / 2.0;
            let beta = (tau - 1.0) / tau_next;
            z = p_new.iter().zip(&step).map(|(a, d)| a + beta * d).collect();
            tau = tau_next;
            ev_z = if beta == 0.0 {
                ev_new.clone()
            } else {
                market.evaluate(&PriceVector::from_vec(nt, nj, z.clone()))
            };
        }
        trace.rows.push(TraceRow {
            iter: iterations,
            g: ev_new.g,
            max_grad,
            step_norm,
            restart: restarted,
        });
        p = p_new;
        ev_p = ev_new;
    }
    trace.wall_seconds = wall.elapsed().as_secs_f64();
    trace.cpu_seconds = crate::cputime::process_seconds() - cpu0;
    trace.final_step = gamma;
    log::debug!(
        "master: {} iterations, converged={}, G={:.6e}, step={:.3e}",
        iterations,
        converged,
        ev_p.g,
        gamma
    );
    let sol = FluidSolution {
        prices: PriceVector::from_vec(nt, nj, p),
        y: ev_p.y,
        loads: ev_p.loads,
        shipper_surplus: ev_p.shipper_surplus,
        dual_objective: ev_p.g,
        grad: ev_p.grad,
        iterations,
        converged,
    };
    Ok((sol, trace))
}
