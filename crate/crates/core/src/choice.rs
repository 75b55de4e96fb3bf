//! Logit surplus, demand and entropy functions.
//!
//! Costs are generalized costs (deterministic cost plus price) over the
//! options `0..=T`, option 0 being opt-out. A surplus is an expected minimum
//! cost, so it is concave in the cost vector.

use crate::error::{Error, Result};
use crate::model::{Instance, ModelKind, PriceVector, Scales};

pub type ModelSpec = Scales;

/// `ln sum exp(a_i)` with max-shift.
pub fn log_sum_exp(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + a.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-(1/s) ln sum exp(-s c_i)`.
pub fn logit_surplus(costs: &[f64], s: f64) -> f64 {
    -log_sum_exp(costs.iter().map(|&c| -s * c)) / s
}

/// Logit shares of `n` over `costs`, renormalized to sum to `n`.
pub fn logit_shares(costs: &[f64], s: f64, n: f64) -> Vec<f64> {
    let surplus = logit_surplus(costs, s);
    let mut y: Vec<f64> = costs.iter().map(|&c| (-s * (c - surplus)).exp()).collect();
    let total: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v *= n / total);
    y
}

/// `v ln(v / total)` with `0 ln 0 = 0`.
fn xlogx(v: f64, total: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v * (v / total).ln()
    }
}

/// Two-branch nest: opt-out at cost `c_out` versus a participation nest
/// whose inclusive cost is `pi_in`. Returns the surplus and the branch masses.
pub fn participation_split(c_out: f64, pi_in: f64, s: f64, n: f64) -> (f64, f64, f64) {
    let pi = logit_surplus(&[c_out, pi_in], s);
    let out = (-s * (c_out - pi)).exp();
    let inn = (-s * (pi_in - pi)).exp();
    let total = out + inn;
    (pi, n * out / total, n * inn / total)
}

pub fn shipper_surplus_from_costs(costs: &[f64], spec: &ModelSpec) -> f64 {
    match spec.kind() {
        ModelKind::Mnl => logit_surplus(costs, spec.theta),
        ModelKind::Nl => {
            let inner = logit_surplus(&costs[1..], spec.theta_hat);
            logit_surplus(&[costs[0], inner], spec.theta)
        }
    }
}

pub fn shipper_demand_from_costs(costs: &[f64], n: f64, spec: &ModelSpec) -> Vec<f64> {
    match spec.kind() {
        ModelKind::Mnl => logit_shares(costs, spec.theta, n),
        ModelKind::Nl => {
            let inner = logit_surplus(&costs[1..], spec.theta_hat);
            let (_, y0, y_in) = participation_split(costs[0], inner, spec.theta, n);
            let mut y = Vec::with_capacity(costs.len());
            y.push(y0);
            y.extend(logit_shares(&costs[1..], spec.theta_hat, y_in));
            y
        }
    }
}

/// Perturbation (generalized entropy) of a shipper demand vector over `0..=T`.
pub fn shipper_entropy(y: &[f64], n: f64, spec: &ModelSpec) -> Result<f64> {
    if let Some(v) = y.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("entropy of negative demand {v}")));
    }
    Ok(match spec.kind() {
        ModelKind::Mnl => -y.iter().map(|&v| xlogx(v, n)).sum::<f64>() / spec.theta,
        ModelKind::Nl => {
            let nest: f64 = y[1..].iter().sum();
            let outer = xlogx(y[0], n) + xlogx(nest, n);
            let inner: f64 = y[1..].iter().map(|&v| xlogx(v, nest)).sum();
            -outer / spec.theta - inner / spec.theta_hat
        }
    })
}

/// Edge weight `exp(-phi_hat (c - p))`; exactly 1 on zero-cost, zero-price edges.
pub fn driver_edge_kernel(cost: f64, price: f64, phi_hat: f64) -> f64 {
    (-phi_hat * (cost - price)).exp()
}

/// Generalized costs `C^S_{j,t} + p(t,j)` over options `0..=T`.
pub fn shipper_costs(inst: &Instance, j: usize, prices: &PriceVector) -> Vec<f64> {
    let c = &inst.det_costs.shipper[j];
    (0..c.len())
        .map(|t| {
            if t == 0 {
                c[0]
            } else {
                c[t] + prices.get(t, j)
            }
        })
        .collect()
}

pub fn shipper_surplus(inst: &Instance, j: usize, prices: &PriceVector, spec: &ModelSpec) -> f64 {
    shipper_surplus_from_costs(&shipper_costs(inst, j, prices), spec)
}

pub fn shipper_demand(
    inst: &Instance,
    j: usize,
    prices: &PriceVector,
    spec: &ModelSpec,
) -> Vec<f64> {
    shipper_demand_from_costs(
        &shipper_costs(inst, j, prices),
        inst.shipper_population(j),
        spec,
    )
}

impl Scales {
    pub fn kind(&self) -> ModelKind {
        self.model
    }
}
