//! Bounded revised primal simplex with implicit GUB rows.
//!
//! Working rows are the non-GUB rows. Each GUB set keeps one basic "key"
//! member outside the working basis; every other basic variable sits in a slot
//! of the working basis with transformed column `a_j - a_key`. The working
//! basis inverse is kept dense and updated by elementary row operations; a key
//! change triggers a refactorization.

use crate::dense::invert_in_place;
use crate::{LinearProgram, LpError, LpSolution, RowSense, Sense, Status};

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    /// Pivots between refactorizations of the working basis.
    pub refactor_every: usize,
    pub max_pivots: usize,
    /// Recognise generalized upper bound rows.
    pub detect_gub: bool,
    /// Columns priced per partial-pricing segment; 0 picks a size from the
    /// problem dimensions.
    pub pricing_window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: crate::FEASIBILITY_TOL,
            optimality_tol: crate::OPTIMALITY_TOL,
            refactor_every: 100,
            max_pivots: 1_000_000,
            detect_gub: true,
            pricing_window: 0,
        }
    }
}

const PIVOT_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-11;
const NO_SET: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
enum State {
    Lower,
    Upper,
    Basic(usize),
    Key(usize),
}

enum Leave {
    Flip,
    Slot(usize),
    Key(usize),
}

struct RatioPick {
    t: f64,
    rate: f64,
    idx: usize,
    leave: Leave,
    bland: bool,
}

impl RatioPick {
    /// Keeps the smallest step; near-ties go to the largest pivot magnitude,
    /// or to the lowest index under Bland's rule.
    fn consider(&mut self, t: f64, rate: f64, idx: usize, leave: Leave) {
        const TIE: f64 = 1e-12;
        let t = t.max(0.0);
        let better = if t < self.t - TIE {
            true
        } else if t <= self.t + TIE {
            if self.bland {
                idx < self.idx
            } else {
                rate.abs() > self.rate.abs()
            }
        } else {
            false
        };
        if better {
            self.t = t;
            self.rate = rate;
            self.idx = idx;
            self.leave = leave;
        }
    }
}

enum Outcome {
    Optimal,
    Unbounded,
}

struct Simplex<'o> {
    opts: &'o SolverOptions,
    m: usize,
    n: usize,
    col_start: Vec<usize>,
    col_row: Vec<usize>,
    col_val: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    set_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    set_rhs: Vec<f64>,
    key: Vec<usize>,
    state: Vec<State>,
    slot: Vec<usize>,
    x: Vec<f64>,
    b: Vec<f64>,
    binv: Vec<f64>,
    pi: Vec<f64>,
    sigma: Vec<f64>,
    pivots: usize,
    since_refactor: usize,
    cursor: usize,
    window: usize,
    degenerate_run: usize,
    bland: bool,
    // scratch
    abar: Vec<f64>,
    alpha: Vec<f64>,
    set_rate: Vec<f64>,
    touched: Vec<usize>,
}

/// Detects GUB rows: equalities with unit coefficients, non-negative rhs and
/// members bounded by `[0, >= rhs]` that share no variable with another set.
fn detect_sets(lp: &LinearProgram) -> (Vec<usize>, Vec<usize>) {
    let n = lp.num_vars();
    let mut owner = vec![NO_SET; n];
    let mut gub_rows = Vec::new();
    for (i, row) in lp.rows.iter().enumerate() {
        if row.sense != RowSense::Eq || row.rhs < 0.0 || row.coeffs.is_empty() {
            continue;
        }
        let ok = row.coeffs.iter().all(|&(j, a)| {
            a == 1.0 && owner[j] == NO_SET && lp.lower[j] == 0.0 && lp.upper[j] >= row.rhs
        });
        if !ok {
            continue;
        }
        let mut seen: Vec<usize> = row.coeffs.iter().map(|&(j, _)| j).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        for &(j, _) in &row.coeffs {
            owner[j] = gub_rows.len();
        }
        gub_rows.push(i);
    }
    (gub_rows, owner)
}

pub(crate) fn solve(lp: &LinearProgram, opts: &SolverOptions) -> Result<LpSolution, LpError> {
    let n_struct = lp.num_vars();
    let (gub_rows, owner) = if opts.detect_gub {
        detect_sets(lp)
    } else {
        (Vec::new(), vec![NO_SET; n_struct])
    };
    let mut is_gub = vec![false; lp.num_rows()];
    for &i in &gub_rows {
        is_gub[i] = true;
    }
    let work_rows: Vec<usize> = (0..lp.num_rows()).filter(|&i| !is_gub[i]).collect();
    let m = work_rows.len();
    let mut work_of = vec![usize::MAX; lp.num_rows()];
    for (w, &i) in work_rows.iter().enumerate() {
        work_of[i] = w;
    }

    // Structural columns restricted to the working rows.
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_struct];
    for (i, row) in lp.rows.iter().enumerate() {
        if is_gub[i] {
            continue;
        }
        for &(j, a) in &row.coeffs {
            if a != 0.0 {
                cols[j].push((work_of[i], a));
            }
        }
    }
    let sense_sign = match lp.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut lo = lp.lower.clone();
    let mut hi = lp.upper.clone();
    let mut cost2: Vec<f64> = lp.costs.iter().map(|c| sense_sign * c).collect();
    let mut set_of = owner;

    let members: Vec<Vec<usize>> = gub_rows
        .iter()
        .map(|&i| lp.rows[i].coeffs.iter().map(|&(j, _)| j).collect())
        .collect();
    let set_rhs: Vec<f64> = gub_rows.iter().map(|&i| lp.rows[i].rhs).collect();

    // Initial point: keys carry their set's rhs, everything else at its lower bound.
    let mut x: Vec<f64> = lo.clone();
    for (s, mem) in members.iter().enumerate() {
        x[mem[0]] = set_rhs[s];
    }
    let b: Vec<f64> = work_rows.iter().map(|&i| lp.rows[i].rhs).collect();
    let mut resid = b.clone();
    for (j, col) in cols.iter().enumerate() {
        if x[j] != 0.0 {
            for &(r, a) in col {
                resid[r] -= a * x[j];
            }
        }
    }

    // Slacks where their sign fits the initial residual, artificials otherwise.
    let mut slot = vec![0usize; m];
    let mut artificial = vec![false; n_struct];
    for (w, &i) in work_rows.iter().enumerate() {
        let r = resid[w];
        let slack_coef = match lp.rows[i].sense {
            RowSense::Le => Some(1.0),
            RowSense::Ge => Some(-1.0),
            RowSense::Eq => None,
        };
        let mut push = |col: (usize, f64), value: f64, art: bool| {
            cols.push(vec![col]);
            lo.push(0.0);
            hi.push(f64::INFINITY);
            cost2.push(0.0);
            set_of.push(NO_SET);
            x.push(value);
            artificial.push(art);
            cols.len() - 1
        };
        if let Some(sc) = slack_coef {
            let v = r / sc;
            if v >= 0.0 {
                slot[w] = push((w, sc), v, false);
                continue;
            }
            push((w, sc), 0.0, false);
        }
        let sign = if r >= 0.0 { 1.0 } else { -1.0 };
        slot[w] = push((w, sign), r.abs(), true);
    }
    let n = cols.len();

    let mut col_start = Vec::with_capacity(n + 1);
    let mut col_row = Vec::new();
    let mut col_val = Vec::new();
    col_start.push(0);
    for col in &cols {
        for &(r, a) in col {
            col_row.push(r);
            col_val.push(a);
        }
        col_start.push(col_row.len());
    }

    let mut state = vec![State::Lower; n];
    for (s, mem) in members.iter().enumerate() {
        state[mem[0]] = State::Key(s);
    }
    for (w, &j) in slot.iter().enumerate() {
        state[j] = State::Basic(w);
    }
    let key: Vec<usize> = members.iter().map(|m| m[0]).collect();
    let phase1_cost: Vec<f64> = (0..n)
        .map(|j| if artificial[j] { 1.0 } else { 0.0 })
        .collect();

    let window = if opts.pricing_window > 0 {
        opts.pricing_window
    } else {
        (n / 64).clamp(256.min(n.max(1)), 1000)
    };
    let nsets = members.len();
    let mut sx = Simplex {
        opts,
        m,
        n,
        col_start,
        col_row,
        col_val,
        lo,
        hi,
        cost: phase1_cost,
        set_of,
        members,
        set_rhs,
        key,
        state,
        slot,
        x,
        b,
        binv: Vec::new(),
        pi: vec![0.0; m],
        sigma: vec![0.0; nsets],
        pivots: 0,
        since_refactor: 0,
        cursor: 0,
        window,
        degenerate_run: 0,
        bland: false,
        abar: vec![0.0; m],
        alpha: vec![0.0; m],
        set_rate: vec![0.0; nsets],
        touched: Vec::new(),
    };
    sx.refactor()?;

    let has_art = artificial.iter().any(|&a| a);
    if has_art {
        sx.run()?;
        let infeas: f64 = (0..n)
            .filter(|&j| artificial[j])
            .map(|j| sx.x[j].max(0.0))
            .sum();
        let scale = 1.0 + sx.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        log::debug!(
            "phase 1 done after {} pivots, infeasibility {infeas:.3e}",
            sx.pivots
        );
        if infeas > opts.feasibility_tol.max(1e-9) * scale * 10.0 {
            return Ok(LpSolution {
                status: Status::Infeasible,
                x: sx.x[..n_struct].to_vec(),
                duals: vec![0.0; lp.num_rows()],
                objective: f64::NAN,
                pivots: sx.pivots,
            });
        }
        for j in 0..n {
            if artificial[j] {
                sx.hi[j] = 0.0;
                if !matches!(sx.state[j], State::Basic(_)) {
                    sx.x[j] = 0.0;
                    sx.state[j] = State::Lower;
                }
            }
        }
    }
    sx.cost = cost2;
    sx.bland = false;
    sx.degenerate_run = 0;
    sx.refactor()?;
    let outcome = sx.run()?;
    log::debug!("phase 2 done after {} pivots", sx.pivots);
    if let Outcome::Unbounded = outcome {
        return Ok(LpSolution {
            status: Status::Unbounded,
            x: sx.x[..n_struct].to_vec(),
            duals: vec![0.0; lp.num_rows()],
            objective: f64::NAN,
            pivots: sx.pivots,
        });
    }

    let mut xs = sx.x[..n_struct].to_vec();
    for j in 0..n_struct {
        // Snap values that sit within tolerance of a bound.
        if (xs[j] - lp.lower[j]).abs() < 1e-12 {
            xs[j] = lp.lower[j];
        } else if lp.upper[j].is_finite() && (xs[j] - lp.upper[j]).abs() < 1e-12 {
            xs[j] = lp.upper[j];
        }
    }
    sx.compute_set_duals();
    let mut duals = vec![0.0; lp.num_rows()];
    for (w, &i) in work_rows.iter().enumerate() {
        duals[i] = sense_sign * sx.pi[w];
    }
    for (s, &i) in gub_rows.iter().enumerate() {
        duals[i] = sense_sign * sx.sigma[s];
    }
    let objective = lp.objective_value(&xs);
    Ok(LpSolution {
        status: Status::Optimal,
        x: xs,
        duals,
        objective,
        pivots: sx.pivots,
    })
}

impl Simplex<'_> {
    fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_start[j]..self.col_start[j + 1];
        self.col_row[r.clone()]
            .iter()
            .copied()
            .zip(self.col_val[r].iter().copied())
    }

    /// Writes the transformed column of `j` into `out`.
    fn transformed(&self, j: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, a) in self.column(j) {
            out[r] += a;
        }
        let s = self.set_of[j];
        if s != NO_SET {
            for (r, a) in self.column(self.key[s]) {
                out[r] -= a;
            }
        }
    }

    fn refactor(&mut self) -> Result<(), LpError> {
        self.invert_basis()?;
        self.since_refactor = 0;
        self.recompute_primal();
        Ok(())
    }

    /// Rebuilds the working-basis inverse; primal values are left as they are.
    fn invert_basis(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut mat = vec![0.0; m * m];
        let mut colbuf = vec![0.0; m];
        for k in 0..m {
            self.transformed(self.slot[k], &mut colbuf);
            for i in 0..m {
                mat[i * m + k] = colbuf[i];
            }
        }
        if !invert_in_place(&mut mat, m, SINGULAR_TOL) {
            return Err(LpError::Numerical(format!(
                "working basis became singular after {} pivots",
                self.pivots
            )));
        }
        self.binv = mat;
        Ok(())
    }

    fn recompute_primal(&mut self) {
        let m = self.m;
        let mut rhs = self.b.clone();
        for (s, &k) in self.key.iter().enumerate() {
            let r = self.set_rhs[s];
            if r != 0.0 {
                for (i, a) in self.column(k) {
                    rhs[i] -= a * r;
                }
            }
        }
        let mut buf = vec![0.0; m];
        for j in 0..self.n {
            if matches!(self.state[j], State::Lower | State::Upper) && self.x[j] != 0.0 {
                self.transformed(j, &mut buf);
                let v = self.x[j];
                for i in 0..m {
                    rhs[i] -= buf[i] * v;
                }
            }
        }
        for i in 0..m {
            let row = &self.binv[i * m..(i + 1) * m];
            let v: f64 = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
            self.x[self.slot[i]] = v;
        }
        for s in 0..self.key.len() {
            let k = self.key[s];
            let mut v = self.set_rhs[s];
            for &j in &self.members[s] {
                if j != k {
                    v -= self.x[j];
                }
            }
            self.x[k] = v;
        }
    }

    fn compute_duals(&mut self) {
        let m = self.m;
        self.pi.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let j = self.slot[i];
            let s = self.set_of[j];
            let cb = if s != NO_SET {
                self.cost[j] - self.cost[self.key[s]]
            } else {
                self.cost[j]
            };
            if cb != 0.0 {
                let row = &self.binv[i * m..(i + 1) * m];
                for (p, r) in self.pi.iter_mut().zip(row) {
                    *p += cb * r;
                }
            }
        }
    }

    /// Dual of GUB set `s`: the key's reduced cost against the working duals.
    fn set_dual(&self, s: usize) -> f64 {
        let k = self.key[s];
        let mut v = self.cost[k];
        for (r, a) in self.column(k) {
            v -= self.pi[r] * a;
        }
        v
    }

    fn compute_set_duals(&mut self) {
        for s in 0..self.key.len() {
            self.sigma[s] = self.set_dual(s);
        }
    }

    fn reduced_cost(&self, j: usize) -> f64 {
        let mut d = self.cost[j];
        for (r, a) in self.column(j) {
            d -= self.pi[r] * a;
        }
        let s = self.set_of[j];
        if s != NO_SET {
            d -= self.set_dual(s);
        }
        d
    }

    /// Returns the entering variable and its direction, if any improves.
    fn eligible(&self, j: usize) -> Option<(f64, f64)> {
        let tol = self.opts.optimality_tol;
        match self.state[j] {
            State::Lower => {
                if self.hi[j] <= self.lo[j] {
                    return None;
                }
                let d = self.reduced_cost(j);
                (d < -tol).then_some((d, 1.0))
            }
            State::Upper => {
                if self.hi[j] <= self.lo[j] {
                    return None;
                }
                let d = self.reduced_cost(j);
                (d > tol).then_some((d, -1.0))
            }
            _ => None,
        }
    }

    fn price(&mut self) -> Option<(usize, f64)> {
        if self.bland {
            return (0..self.n).find_map(|j| self.eligible(j).map(|(_, dir)| (j, dir)));
        }
        let n = self.n;
        let mut scanned = 0;
        let mut start = self.cursor % n.max(1);
        while scanned < n {
            let len = self.window.min(n - scanned);
            let mut best: Option<(usize, f64, f64)> = None;
            for off in 0..len {
                let j = (start + off) % n;
                if let Some((d, dir)) = self.eligible(j) {
                    if best.map_or(true, |(_, bd, _)| d.abs() > bd) {
                        best = Some((j, d.abs(), dir));
                    }
                }
            }
            scanned += len;
            start = (start + len) % n;
            if let Some((j, _, dir)) = best {
                self.cursor = start;
                return Some((j, dir));
            }
        }
        None
    }

    fn run(&mut self) -> Result<Outcome, LpError> {
        let m = self.m;
        loop {
            if self.pivots >= self.opts.max_pivots {
                return Err(LpError::PivotLimit(self.opts.max_pivots));
            }
            self.compute_duals();
            let Some((q, dir)) = self.price() else {
                if self.since_refactor > 0 {
                    // Confirm optimality on a fresh factorization.
                    self.refactor()?;
                    self.compute_duals();
                    if self.price().is_some() {
                        continue;
                    }
                }
                return Ok(Outcome::Optimal);
            };

            let mut abar = std::mem::take(&mut self.abar);
            self.transformed(q, &mut abar);
            let mut alpha = std::mem::take(&mut self.alpha);
            for i in 0..m {
                let row = &self.binv[i * m..(i + 1) * m];
                alpha[i] = row.iter().zip(&abar).map(|(a, b)| a * b).sum();
            }
            self.abar = abar;

            // Rates of change of the keys, per unit step of the entering variable.
            for &s in &self.touched {
                self.set_rate[s] = 0.0;
            }
            self.touched.clear();
            let qs = self.set_of[q];
            if qs != NO_SET {
                self.set_rate[qs] -= dir;
                self.touched.push(qs);
            }
            for i in 0..m {
                let s = self.set_of[self.slot[i]];
                if s != NO_SET && alpha[i] != 0.0 {
                    if self.set_rate[s] == 0.0 && !self.touched.contains(&s) {
                        self.touched.push(s);
                    }
                    self.set_rate[s] += dir * alpha[i];
                }
            }

            let mut pick = RatioPick {
                t: self.hi[q] - self.lo[q],
                rate: 1.0,
                idx: q,
                leave: Leave::Flip,
                bland: self.bland,
            };
            for i in 0..m {
                let rate = -dir * alpha[i];
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let p = self.slot[i];
                let t = if rate < 0.0 {
                    (self.x[p] - self.lo[p]) / -rate
                } else if self.hi[p].is_finite() {
                    (self.hi[p] - self.x[p]) / rate
                } else {
                    continue;
                };
                pick.consider(t, rate, p, Leave::Slot(i));
            }
            for &s in &self.touched {
                let rate = self.set_rate[s];
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let k = self.key[s];
                let t = if rate < 0.0 {
                    (self.x[k] - self.lo[k]) / -rate
                } else if self.hi[k].is_finite() {
                    (self.hi[k] - self.x[k]) / rate
                } else {
                    continue;
                };
                pick.consider(t, rate, k, Leave::Key(s));
            }
            if !pick.t.is_finite() {
                self.alpha = alpha;
                return Ok(Outcome::Unbounded);
            }

            let t = pick.t;
            let leave = pick.leave;
            if t > 0.0 {
                self.x[q] += dir * t;
                for i in 0..m {
                    let p = self.slot[i];
                    self.x[p] -= dir * alpha[i] * t;
                }
                for &s in &self.touched {
                    let k = self.key[s];
                    self.x[k] += self.set_rate[s] * t;
                }
            }
            if t <= 1e-12 {
                self.degenerate_run += 1;
                if self.degenerate_run > 100 + self.m && !self.bland {
                    log::debug!(
                        "switching to Bland's rule after {} degenerate pivots",
                        self.degenerate_run
                    );
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
                self.bland = false;
            }
            self.pivots += 1;

            match leave {
                Leave::Flip => {
                    if dir > 0.0 {
                        self.x[q] = self.hi[q];
                        self.state[q] = State::Upper;
                    } else {
                        self.x[q] = self.lo[q];
                        self.state[q] = State::Lower;
                    }
                    self.alpha = alpha;
                }
                Leave::Slot(r) => {
                    let p = self.slot[r];
                    self.park(p, -dir * alpha[r]);
                    self.slot[r] = q;
                    self.state[q] = State::Basic(r);
                    self.pivot_inverse(r, &alpha);
                    self.alpha = alpha;
                    self.since_refactor += 1;
                    if self.since_refactor >= self.opts.refactor_every {
                        self.refactor()?;
                    }
                }
                Leave::Key(s) => {
                    let k = self.key[s];
                    let rate = self.set_rate[s];
                    self.park(k, rate);
                    if self.set_of[q] == s {
                        self.key[s] = q;
                        self.state[q] = State::Key(s);
                    } else {
                        // Promote the working member of s with the largest pivot.
                        let mut pick: Option<(usize, f64)> = None;
                        for i in 0..m {
                            if self.set_of[self.slot[i]] == s
                                && pick.map_or(true, |(_, a)| alpha[i].abs() > a)
                            {
                                pick = Some((i, alpha[i].abs()));
                            }
                        }
                        let Some((r, _)) = pick else {
                            return Err(LpError::Numerical(
                                "key left a set without a basic replacement".into(),
                            ));
                        };
                        let jstar = self.slot[r];
                        self.key[s] = jstar;
                        self.state[jstar] = State::Key(s);
                        self.slot[r] = q;
                        self.state[q] = State::Basic(r);
                    }
                    self.alpha = alpha;
                    self.since_refactor += 1;
                    if self.since_refactor >= self.opts.refactor_every {
                        self.refactor()?;
                    } else {
                        self.invert_basis()?;
                    }
                }
            }
        }
    }

    /// Moves a leaving basic variable to the bound it reached.
    fn park(&mut self, p: usize, rate: f64) {
        if rate > 0.0 && self.hi[p].is_finite() {
            self.x[p] = self.hi[p];
            self.state[p] = State::Upper;
        } else {
            self.x[p] = self.lo[p];
            self.state[p] = State::Lower;
        }
    }

    fn pivot_inverse(&mut self, r: usize, alpha: &[f64]) {
        let m = self.m;
        let piv = alpha[r];
        let inv = 1.0 / piv;
        for k in 0..m {
            self.binv[r * m + k] *= inv;
        }
        let (before, rest) = self.binv.split_at_mut(r * m);
        let (prow, after) = rest.split_at_mut(m);
        for (i, row) in before.chunks_exact_mut(m).enumerate() {
            let f = alpha[i];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
            }
        }
        for (off, row) in after.chunks_exact_mut(m).enumerate() {
            let f = alpha[r + 1 + off];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
            }
        }
    }
}
