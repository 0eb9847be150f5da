//! Large programs go to the `microlp` sparse simplex.

use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};

use super::{Cmp, LinearProgram, LpError, LpSolution, Status};

pub(super) fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..lp.num_vars())
        .map(|j| p.add_var(lp.cost()[j], (lp.lower()[j], lp.upper()[j])))
        .collect();
    for c in lp.constraints() {
        let op = match c.cmp {
            Cmp::Le => ComparisonOp::Le,
            Cmp::Eq => ComparisonOp::Eq,
            Cmp::Ge => ComparisonOp::Ge,
        };
        let terms: Vec<_> = c.terms.iter().map(|&(j, a)| (vars[j], a)).collect();
        p.add_constraint(terms, op, c.rhs);
    }
    match p.solve() {
        Ok(SolveOutcome::Solution(sol)) => {
            let x: Vec<f64> = (0..lp.num_vars())
                .map(|j| sol.var_value(vars[j]).clamp(lp.lower()[j], lp.upper()[j]))
                .collect();
            Ok(LpSolution::optimal(lp, x, None))
        }
        Ok(SolveOutcome::Interrupted(_)) => Err(LpError::Backend("solve interrupted".into())),
        Err(microlp::Error::Infeasible) => Ok(LpSolution::without_point(Status::Infeasible)),
        Err(microlp::Error::Unbounded) => Ok(LpSolution::without_point(Status::Unbounded)),
        Err(e) => Err(LpError::Backend(e.to_string())),
    }
}
