//! Linear programs: model, solvers and a brute-force oracle.
//!
//! Problems are minimizations over variables with a finite lower bound and an
//! optional upper bound. Small problems go to the dense tableau simplex in
//! [`dense`]; large ones to the sparse backend in [`sparse`].

mod dense;
mod oracle;
mod sparse;

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

pub use oracle::{enumerate_vertices_oracle, ORACLE_MAX_VARS};

/// Largest problem the automatic backend choice sends to the dense solver.
pub const DENSE_MAX_VARS: usize = 2000;

pub type VarId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Eq,
    Ge,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Le => "<=",
            Cmp::Eq => "=",
            Cmp::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Distance to violation: nonnegative iff satisfied.
    pub fn slack(&self, x: &[f64]) -> f64 {
        let act = self.activity(x);
        match self.cmp {
            Cmp::Le => self.rhs - act,
            Cmp::Ge => act - self.rhs,
            Cmp::Eq => -(act - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("iteration limit of {0} reached")]
    IterationLimit(usize),
    #[error("{vars} variables exceed the oracle limit of {limit}")]
    TooLarge { vars: usize, limit: usize },
    #[error("sparse backend failed: {0}")]
    Backend(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearProgram {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    constraints: Vec<Constraint>,
}

impl LinearProgram {
    pub fn new() -> LinearProgram {
        LinearProgram::default()
    }

    /// Adds a variable with objective coefficient `cost` and bounds
    /// `[lower, upper]`; `upper` may be `f64::INFINITY`.
    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, lower: f64, upper: f64) -> VarId {
        self.names.push(name.into());
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.push(cost);
        self.names.len() - 1
    }

    pub fn add_constraint(&mut self, name: impl Into<String>, terms: Vec<(VarId, f64)>, cmp: Cmp, rhs: f64) {
        self.constraints.push(Constraint { name: name.into(), terms, cmp, rhs });
    }

    pub fn set_cost(&mut self, j: VarId, c: f64) {
        self.cost[j] = c;
    }

    pub fn set_bounds(&mut self, j: VarId, lower: f64, upper: f64) {
        self.lower[j] = lower;
        self.upper[j] = upper;
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn name(&self, j: VarId) -> &str {
        &self.names[j]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn check(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        for j in 0..n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if !lo.is_finite() || hi.is_nan() || lo > hi || !self.cost[j].is_finite() {
                return Err(LpError::Malformed(format!(
                    "variable {} has bounds [{lo}, {hi}] and cost {}",
                    self.names[j], self.cost[j]
                )));
            }
        }
        for c in &self.constraints {
            if !c.rhs.is_finite() || c.terms.iter().any(|&(j, a)| j >= n || !a.is_finite()) {
                return Err(LpError::Malformed(format!("constraint {}", c.name)));
            }
        }
        Ok(())
    }

    /// Largest bound or constraint violation of `x`, scaled by row size.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for c in &self.constraints {
            let scale = 1.0 + c.rhs.abs().max(c.terms.iter().map(|t| t.1.abs()).fold(0.0, f64::max));
            worst = worst.max(-c.slack(x) / scale);
        }
        worst
    }

    /// Text dump, one item per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "minimize:")?;
        for (j, &c) in self.cost.iter().enumerate() {
            if c != 0.0 {
                write!(w, " {c:+} {}", self.names[j])?;
            }
        }
        writeln!(w)?;
        for c in &self.constraints {
            write!(w, "{}:", c.name)?;
            for &(j, a) in &c.terms {
                write!(w, " {a:+} {}", self.names[j])?;
            }
            writeln!(w, " {} {}", c.cmp.symbol(), c.rhs)?;
        }
        for j in 0..self.num_vars() {
            writeln!(w, "bound: {} <= {} <= {}", self.lower[j], self.names[j], self.upper[j])?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: Status,
    /// Empty unless optimal.
    pub x: Vec<f64>,
    pub objective: f64,
    /// Per-constraint distance to violation.
    pub slacks: Vec<f64>,
    /// Row multipliers of the original constraints, when the backend
    /// provides them. Sign convention: `c − Aᵀy` are the reduced costs.
    pub duals: Option<Vec<f64>>,
}

impl LpSolution {
    fn without_point(status: Status) -> LpSolution {
        LpSolution { status, x: Vec::new(), objective: f64::NAN, slacks: Vec::new(), duals: None }
    }

    fn optimal(lp: &LinearProgram, x: Vec<f64>, duals: Option<Vec<f64>>) -> LpSolution {
        let slacks = lp.constraints.iter().map(|c| c.slack(&x)).collect();
        LpSolution { status: Status::Optimal, objective: lp.objective(&x), x, slacks, duals }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backend {
    /// Dense up to [`DENSE_MAX_VARS`] variables, sparse beyond.
    #[default]
    Auto,
    Dense,
    Sparse,
}

pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    solve_with(lp, Backend::Auto)
}

pub fn solve_with(lp: &LinearProgram, backend: Backend) -> Result<LpSolution, LpError> {
    lp.check()?;
    let dense = match backend {
        Backend::Auto => lp.num_vars() <= DENSE_MAX_VARS,
        Backend::Dense => true,
        Backend::Sparse => false,
    };
    if dense {
        dense::solve(lp)
    } else {
        sparse::solve(lp)
    }
}
