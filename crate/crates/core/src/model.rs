//! Shared domain types: the market instance, prices and matching outcomes.
//!
//! Time windows are numbered `1..=T`; option `0` is the shipper opt-out.
//! Money and time share one unit (minutes).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::taskchain::num_edge_types;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mnl,
    Nl,
}

/// Scale parameters. For MNL the hatted scales must equal the plain ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub model: ModelKind,
    pub theta: f64,
    pub theta_hat: f64,
    pub phi: f64,
    pub phi_hat: f64,
}

impl Scales {
    pub fn mnl(theta: f64, phi: f64) -> Self {
        Self {
            model: ModelKind::Mnl,
            theta,
            theta_hat: theta,
            phi,
            phi_hat: phi,
        }
    }

    pub fn nl(theta: f64, theta_hat: f64, phi: f64, phi_hat: f64) -> Self {
        Self {
            model: ModelKind::Nl,
            theta,
            theta_hat,
            phi,
            phi_hat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverGroup {
    /// Time window, `1..=T`.
    pub t: usize,
    /// Index into `driver_od_pairs`.
    pub w: usize,
    pub drivers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShipperGroup {
    /// Index into `task_pairs`.
    pub j: usize,
    pub shippers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCosts {
    /// `shipper[j][t]` for `t` in `0..=T`; entry 0 is the opt-out cost.
    pub shipper: Vec<Vec<f64>>,
}

/// Sampled private utilities. Perceived costs are `C - zeta` for shippers
/// and `c - eps` for drivers, so larger draws make an option more attractive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivateCosts {
    /// `shipper[b][t]`, `t` in `0..=T`.
    pub shipper: Vec<Vec<f64>>,
    /// `driver[a][e]` over the edge types of the task-chain network.
    pub driver: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub zones: Vec<u64>,
    /// Minutes, indexed by zone position.
    pub travel_time: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub n_windows: usize,
    #[serde(rename = "K")]
    pub k_max: usize,
    /// (origin, destination) as zone positions.
    pub driver_od_pairs: Vec<[usize; 2]>,
    /// (pickup, delivery) as zone positions.
    pub task_pairs: Vec<[usize; 2]>,
    /// One entry per (t, w), ordered by `group_index`.
    pub driver_groups: Vec<DriverGroup>,
    /// One entry per task pair, ordered by `j`.
    pub shipper_groups: Vec<ShipperGroup>,
    pub scales: Scales,
    pub det_costs: DetCosts,
    pub private_costs: PrivateCosts,
}

impl Instance {
    pub fn n_tasks(&self) -> usize {
        self.task_pairs.len()
    }

    pub fn n_od(&self) -> usize {
        self.driver_od_pairs.len()
    }

    pub fn n_drivers(&self) -> usize {
        self.private_costs.driver.len()
    }

    pub fn n_shippers(&self) -> usize {
        self.private_costs.shipper.len()
    }

    /// Position of driver group (t, w) in `driver_groups`.
    pub fn group_index(&self, t: usize, w: usize) -> usize {
        (t - 1) * self.n_od() + w
    }

    pub fn tt(&self, a: usize, b: usize) -> f64 {
        self.travel_time[a][b]
    }

    pub fn driver_population(&self, g: usize) -> f64 {
        self.driver_groups[g].drivers.len() as f64
    }

    pub fn shipper_population(&self, j: usize) -> f64 {
        self.shipper_groups[j].shippers.len() as f64
    }

    /// Copy with every private draw set to zero.
    pub fn without_private_costs(&self) -> Instance {
        let mut out = self.clone();
        for row in out
            .private_costs
            .shipper
            .iter_mut()
            .chain(out.private_costs.driver.iter_mut())
        {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_17(self)
    }

    pub fn from_json(text: &str) -> Result<Instance> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Instance> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub index: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn violation(field: &'static str, index: Option<String>, message: impl Into<String>) -> Violation {
    Violation {
        field,
        index,
        message: message.into(),
    }
}

pub fn validate(inst: &Instance) -> Vec<Violation> {
    let mut out = Vec::new();
    let nz = inst.zones.len();
    if inst.travel_time.len() != nz || inst.travel_time.iter().any(|r| r.len() != nz) {
        out.push(violation("travel_time", None, format!("must be {nz}x{nz}")));
    } else {
        for (a, row) in inst.travel_time.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    out.push(violation(
                        "travel_time",
                        Some(format!("{a},{b}")),
                        "negative or non-finite",
                    ));
                }
                if a == b && v != 0.0 {
                    out.push(violation(
                        "travel_time",
                        Some(format!("{a},{a}")),
                        "nonzero diagonal",
                    ));
                }
            }
        }
    }
    if inst.n_windows == 0 {
        out.push(violation("T", None, "at least one time window required"));
    }
    if inst.k_max == 0 {
        out.push(violation("K", None, "must be at least 1"));
    }
    for (name, pairs) in [
        ("driver_od_pairs", &inst.driver_od_pairs),
        ("task_pairs", &inst.task_pairs),
    ] {
        for (i, p) in pairs.iter().enumerate() {
            if p[0] >= nz || p[1] >= nz {
                out.push(violation(
                    name,
                    Some(i.to_string()),
                    "zone index out of range",
                ));
            }
        }
    }
    let s = &inst.scales;
    for (name, v) in [
        ("scales.theta", s.theta),
        ("scales.theta_hat", s.theta_hat),
        ("scales.phi", s.phi),
        ("scales.phi_hat", s.phi_hat),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            out.push(violation(name, None, "must be strictly positive"));
        }
    }
    match s.model {
        ModelKind::Mnl => {
            if s.theta != s.theta_hat || s.phi != s.phi_hat {
                out.push(violation(
                    "scales",
                    None,
                    "MNL requires theta_hat = theta and phi_hat = phi",
                ));
            }
        }
        ModelKind::Nl => {
            if s.theta > s.theta_hat || s.phi > s.phi_hat {
                out.push(violation(
                    "scales",
                    None,
                    "NL requires theta <= theta_hat and phi <= phi_hat",
                ));
            }
        }
    }

    let n_a = inst.n_drivers();
    let n_b = inst.n_shippers();
    let expect_groups = inst.n_windows * inst.n_od();
    if inst.driver_groups.len() != expect_groups {
        out.push(violation(
            "driver_groups",
            None,
            format!(
                "expected {expect_groups} groups, found {}",
                inst.driver_groups.len()
            ),
        ));
    }
    let mut seen = vec![0u32; n_a];
    let mut total = 0;
    for (g, grp) in inst.driver_groups.iter().enumerate() {
        let at = format!("t={},w={}", grp.t, grp.w);
        if grp.t == 0 || grp.t > inst.n_windows || grp.w >= inst.n_od() {
            out.push(violation(
                "driver_groups",
                Some(at.clone()),
                "window or OD index out of range",
            ));
        } else if inst.group_index(grp.t, grp.w) != g {
            out.push(violation(
                "driver_groups",
                Some(at.clone()),
                "groups out of canonical order",
            ));
        }
        if grp.drivers.is_empty() {
            out.push(violation("driver_groups", Some(at.clone()), "empty group"));
        }
        total += grp.drivers.len();
        for &a in &grp.drivers {
            if a < n_a {
                seen[a] += 1;
            } else {
                out.push(violation(
                    "driver_groups",
                    Some(at.clone()),
                    format!("driver {a} has no private costs"),
                ));
            }
        }
    }
    if total != n_a || seen.iter().any(|&c| c != 1) {
        out.push(violation(
            "driver_groups",
            None,
            "every driver must belong to exactly one group",
        ));
    }

    if inst.shipper_groups.len() != inst.n_tasks() {
        out.push(violation(
            "shipper_groups",
            None,
            "one group per task pair required",
        ));
    }
    let mut seen = vec![0u32; n_b];
    let mut total = 0;
    for (j, grp) in inst.shipper_groups.iter().enumerate() {
        if grp.j != j {
            out.push(violation(
                "shipper_groups",
                Some(j.to_string()),
                "groups out of canonical order",
            ));
        }
        if grp.shippers.is_empty() {
            out.push(violation(
                "shipper_groups",
                Some(j.to_string()),
                "empty group",
            ));
        }
        total += grp.shippers.len();
        for &b in &grp.shippers {
            if b < n_b {
                seen[b] += 1;
            } else {
                out.push(violation(
                    "shipper_groups",
                    Some(j.to_string()),
                    format!("shipper {b} has no private costs"),
                ));
            }
        }
    }
    if total != n_b || seen.iter().any(|&c| c != 1) {
        out.push(violation(
            "shipper_groups",
            None,
            "every shipper must belong to exactly one group",
        ));
    }

    let opts = inst.n_windows + 1;
    if inst.det_costs.shipper.len() != inst.n_tasks() {
        out.push(violation(
            "det_costs.shipper",
            None,
            "one row per task pair required",
        ));
    }
    for (j, row) in inst.det_costs.shipper.iter().enumerate() {
        if row.len() != opts || row.iter().any(|v| !v.is_finite()) {
            out.push(violation(
                "det_costs.shipper",
                Some(j.to_string()),
                format!("need {opts} finite entries"),
            ));
        }
    }
    for (b, row) in inst.private_costs.shipper.iter().enumerate() {
        if row.len() != opts || row.iter().any(|v| !v.is_finite()) {
            out.push(violation(
                "private_costs.shipper",
                Some(b.to_string()),
                format!("need {opts} finite entries"),
            ));
        }
    }
    let ne = num_edge_types(inst.n_tasks());
    for (a, row) in inst.private_costs.driver.iter().enumerate() {
        if row.len() != ne || row.iter().any(|v| !v.is_finite()) {
            out.push(violation(
                "private_costs.driver",
                Some(a.to_string()),
                format!("need {ne} finite entries"),
            ));
        } else if row[ne - 1] != 0.0 {
            out.push(violation(
                "private_costs.driver",
                Some(a.to_string()),
                "dummy edge draw must be 0",
            ));
        }
    }
    out
}

pub fn ensure_valid(inst: &Instance) -> Result<()> {
    let v = validate(inst);
    if v.is_empty() {
        Ok(())
    } else {
        let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        Err(Error::Instance(msg.join("; ")))
    }
}

/// Rewards/prices `p(t, j)` for windows `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    pub n_windows: usize,
    pub n_tasks: usize,
    pub p: Vec<f64>,
}

impl PriceVector {
    pub fn zeros(n_windows: usize, n_tasks: usize) -> Self {
        Self {
            n_windows,
            n_tasks,
            p: vec![0.0; n_windows * n_tasks],
        }
    }

    pub fn from_vec(n_windows: usize, n_tasks: usize, p: Vec<f64>) -> Self {
        assert_eq!(p.len(), n_windows * n_tasks);
        Self {
            n_windows,
            n_tasks,
            p,
        }
    }

    pub fn idx(&self, t: usize, j: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.n_windows && j < self.n_tasks);
        (t - 1) * self.n_tasks + j
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.p[self.idx(t, j)]
    }

    pub fn set(&mut self, t: usize, j: usize, v: f64) {
        let i = self.idx(t, j);
        self.p[i] = v;
    }

    /// Prices of all tasks in window `t`.
    pub fn window(&self, t: usize) -> &[f64] {
        &self.p[(t - 1) * self.n_tasks..t * self.n_tasks]
    }

    pub fn is_feasible(&self) -> bool {
        self.p.iter().all(|&v| v >= 0.0)
    }
}

/// Integral matching with transfers, keyed by agent id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Chosen option per shipper; 0 is opt-out.
    pub shipper_assign: Vec<usize>,
    /// Edge types traversed per driver, one per layer.
    pub driver_assign: Vec<Vec<usize>>,
    pub shipper_payments: Vec<f64>,
    pub driver_rewards: Vec<f64>,
    pub realized_surplus: f64,
}

/// Serializes with every float printed to 17 significant digits.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Float17);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

struct Float17;

impl Float17 {
    fn write<W: ?Sized + Write>(w: &mut W, v: f64) -> std::io::Result<()> {
        if v.is_finite() {
            write!(w, "{:.16e}", v)
        } else {
            // JSON has no representation for these; serde_json uses null too.
            w.write_all(b"null")
        }
    }
}

impl serde_json::ser::Formatter for Float17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        Self::write(w, v)
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        Self::write(w, v as f64)
    }
}
