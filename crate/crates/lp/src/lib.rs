//! Exact linear programming for the matching benchmarks and auction sub-problems.
//!
//! The solver is a dense revised primal simplex over bounded variables. Equality
//! rows of the form `sum x_j = r` whose columns have lower bound zero and appear
//! in no other such row are recognised as generalized upper bound (GUB) sets and
//! are never stored in the working basis. Assignment-style programs (one
//! convexity row per agent plus a handful of coupling rows) therefore run with a
//! working basis whose size is the number of coupling rows only.

mod dense;
mod simplex;

use std::fmt::Write as _;

pub use simplex::SolverOptions;

/// Feasibility tolerance used by the solver and by [`LpSolution::residuals`].
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Reduced-cost tolerance.
pub const OPTIMALITY_TOL: f64 = 1e-9;
/// Threshold above which a supposedly integral solution is rejected.
pub const INTEGRALITY_TOL: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LpError {
    #[error("invalid linear program: {0}")]
    Invalid(String),
    #[error("simplex stalled: pivot limit of {0} reached")]
    PivotLimit(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

impl RowSense {
    fn symbol(self) -> &'static str {
        match self {
            RowSense::Le => "<=",
            RowSense::Eq => "=",
            RowSense::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub sense: Sense,
    pub costs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new(sense: Sense) -> Self {
        Self {
            sense,
            costs: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Adds a variable with bounds `[0, +inf)` and returns its index.
    pub fn add_var(&mut self, cost: f64) -> usize {
        self.add_bounded_var(cost, 0.0, f64::INFINITY)
    }

    pub fn add_bounded_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.costs.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.costs.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: RowSense, rhs: f64) -> usize {
        self.rows.push(Row { coeffs, sense, rhs });
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.costs.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.costs.len();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Invalid(format!(
                "bound vectors have lengths {}/{} for {} variables",
                self.lower.len(),
                self.upper.len(),
                n
            )));
        }
        for (j, &c) in self.costs.iter().enumerate() {
            if !c.is_finite() {
                return Err(LpError::Invalid(format!(
                    "cost of variable {j} is not finite"
                )));
            }
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if !lo.is_finite() {
                return Err(LpError::Invalid(format!(
                    "variable {j} has no finite lower bound"
                )));
            }
            if hi.is_nan() || hi < lo {
                return Err(LpError::Invalid(format!(
                    "variable {j} has empty bound interval [{lo}, {hi}]"
                )));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(LpError::Invalid(format!("rhs of row {i} is not finite")));
            }
            for &(j, a) in &row.coeffs {
                if j >= n {
                    return Err(LpError::Invalid(format!(
                        "row {i} references variable {j} but only {n} exist"
                    )));
                }
                if !a.is_finite() {
                    return Err(LpError::Invalid(format!(
                        "row {i} has a non-finite coefficient for variable {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.solve_with(&SolverOptions::default())
    }

    pub fn solve_with(&self, options: &SolverOptions) -> Result<LpSolution, LpError> {
        self.validate()?;
        simplex::solve(self, options)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.costs.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Fixed-width tabular dump, one line per row and one per variable bound.
    pub fn dump_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>10} {:>10}",
            match self.sense {
                Sense::Minimize => "MIN",
                Sense::Maximize => "MAX",
            },
            self.num_vars(),
            self.num_rows()
        );
        for (j, c) in self.costs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>16.8e} {:>16.8e} {:>16.8e}",
                "VAR", j, c, self.lower[j], self.upper[j]
            );
        }
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(
                out,
                "{:<8} {:>10} {:>3} {:>16.8e}",
                "ROW",
                i,
                row.sense.symbol(),
                row.rhs
            );
            for &(j, a) in &row.coeffs {
                let _ = write!(out, " {:>8}:{:<+12.6e}", j, a);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: Status,
    pub x: Vec<f64>,
    /// Shadow prices: derivative of the optimal objective (in the program's own
    /// sense) with respect to each row's right-hand side.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

/// Residuals of a claimed optimal solution.
#[derive(Clone, Copy, Debug, Default)]
pub struct Residuals {
    pub primal: f64,
    pub bounds: f64,
    pub dual_sign: f64,
    pub complementary: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    /// Largest distance of any listed variable from the nearest integer.
    pub fn max_fractional_residual(&self, vars: impl IntoIterator<Item = usize>) -> f64 {
        vars.into_iter()
            .map(|j| (self.x[j] - self.x[j].round()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_fractional_residual(&self) -> f64 {
        self.max_fractional_residual(0..self.x.len())
    }

    /// Primal feasibility, dual sign and complementary slackness residuals
    /// against `lp`. Reduced costs are recomputed from the row duals.
    pub fn residuals(&self, lp: &LinearProgram) -> Residuals {
        let mut res = Residuals::default();
        let sign = match lp.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut reduced: Vec<f64> = lp.costs.iter().map(|c| sign * c).collect();
        for (i, row) in lp.rows.iter().enumerate() {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * self.x[j]).sum();
            let slack = row.rhs - lhs;
            let viol = match row.sense {
                RowSense::Le => (-slack).max(0.0),
                RowSense::Ge => slack.max(0.0),
                RowSense::Eq => slack.abs(),
            };
            res.primal = res.primal.max(viol);
            let y = sign * self.duals[i];
            let bad_sign = match row.sense {
                RowSense::Le => y.max(0.0),
                RowSense::Ge => (-y).max(0.0),
                RowSense::Eq => 0.0,
            };
            res.dual_sign = res.dual_sign.max(bad_sign);
            if row.sense != RowSense::Eq {
                res.complementary = res.complementary.max((y * slack).abs());
            }
            for &(j, a) in &row.coeffs {
                reduced[j] -= y * a;
            }
        }
        for (j, d) in reduced.iter().enumerate() {
            let (lo, hi, v) = (lp.lower[j], lp.upper[j], self.x[j]);
            res.bounds = res.bounds.max((lo - v).max(0.0)).max((v - hi).max(0.0));
            // A variable strictly inside its bounds must price out at zero; one
            // at a bound must have a reduced cost of the right sign.
            let at_lo = (v - lo).abs() <= 1e-7;
            let at_hi = hi.is_finite() && (hi - v).abs() <= 1e-7;
            let viol = if at_lo && at_hi {
                0.0
            } else if at_lo {
                (-d).max(0.0)
            } else if at_hi {
                d.max(0.0)
            } else {
                d.abs()
            };
            res.complementary = res.complementary.max(viol);
        }
        res
    }
}
