//! Junction policies: the cell-to-cell flow matrix at a given state, and
//! diagnostic checks of the demand, supply and monotonicity constraints.

use std::fmt;

use thiserror::Error;

use crate::network::{Bound, CellId, Network, NodeId, TurningMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("node {node}: {reason}")]
    Topology { node: NodeId, reason: String },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// `min{d_i, s_j}` on a line; identical to the proportional rule at
    /// one-in one-out nodes and rejected elsewhere.
    LineCtm,
    /// One throttled downstream cell throttles every outflow of the node.
    Fifo,
    /// Each downstream cell throttles only its own inflow.
    NonFifo,
    /// `θ·κ^F + (1−θ)·κ^NF`.
    Mixture { theta: f64 },
    /// Two-input merges split scarce supply by priority; diverges use the
    /// proportional rule. `priorities[i]` is the priority of cell `i` at the
    /// merge it feeds.
    PriorityMerge { priorities: Vec<f64> },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::LineCtm => "line",
            Policy::Fifo => "fifo",
            Policy::NonFifo => "nonfifo",
            Policy::Mixture { .. } => "mixture",
            Policy::PriorityMerge { .. } => "priority",
        }
    }

    /// Policies whose flows satisfy the cooperative sign conditions.
    pub fn is_monotone(&self) -> bool {
        match self {
            Policy::LineCtm | Policy::NonFifo | Policy::PriorityMerge { .. } => true,
            Policy::Mixture { theta } => *theta == 0.0,
            Policy::Fifo => false,
        }
    }

    /// Mixture with the endpoints mapped to the pure rules.
    pub fn from_theta(theta: f64) -> Policy {
        if theta == 0.0 {
            Policy::NonFifo
        } else if theta == 1.0 {
            Policy::Fifo
        } else {
            Policy::Mixture { theta }
        }
    }

    /// Parameter and topology checks against `net`.
    pub fn validate(&self, net: &Network) -> Result<(), PolicyError> {
        match self {
            Policy::Mixture { theta } if !(0.0..=1.0).contains(theta) => {
                Err(PolicyError::Invalid(format!("theta {theta} outside [0, 1]")))
            }
            Policy::LineCtm => {
                for v in net.junctions() {
                    if net.node_in(v).len() > 1 || net.node_out(v).len() > 1 {
                        return Err(PolicyError::Topology {
                            node: v,
                            reason: "line rule needs one incoming and one outgoing cell".into(),
                        });
                    }
                }
                Ok(())
            }
            Policy::PriorityMerge { priorities } => {
                if priorities.len() != net.len() {
                    return Err(PolicyError::Dimension { expected: net.len(), got: priorities.len() });
                }
                for v in net.junctions() {
                    let ins = net.node_in(v);
                    let outs = net.node_out(v);
                    if ins.len() > 1 && outs.len() > 1 {
                        return Err(PolicyError::Topology {
                            node: v,
                            reason: "priority merge needs merge/diverge junctions".into(),
                        });
                    }
                    if ins.len() > 2 {
                        return Err(PolicyError::Topology {
                            node: v,
                            reason: format!("{} incoming cells, at most 2 allowed", ins.len()),
                        });
                    }
                    if ins.len() == 2 {
                        let (p, q) = (priorities[ins[0]], priorities[ins[1]]);
                        if p < 0.0 || q < 0.0 || (p + q - 1.0).abs() > 1e-12 {
                            return Err(PolicyError::Invalid(format!(
                                "priorities at node {v} are {p} and {q}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Mixture { theta } => write!(f, "mixture({theta})"),
            p => f.write_str(p.name()),
        }
    }
}

/// Demand scaling α, supply caps β and an optional turning override.
#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    pub alpha: Vec<f64>,
    pub beta: Vec<Bound>,
    /// `None` keeps the uncontrolled turning preferences.
    pub turning: Option<TurningMatrix>,
}

impl Controls {
    pub fn identity(n: usize) -> Controls {
        Controls { alpha: vec![1.0; n], beta: vec![Bound::Unbounded; n], turning: None }
    }

    pub fn turning<'a>(&'a self, uncontrolled: &'a TurningMatrix) -> &'a TurningMatrix {
        self.turning.as_ref().unwrap_or(uncontrolled)
    }

    pub fn demand(&self, net: &Network, rho: &[f64]) -> Vec<f64> {
        (0..net.len()).map(|i| net.cell(i).demand(rho[i], self.alpha[i])).collect()
    }

    pub fn supply(&self, net: &Network, rho: &[f64]) -> Vec<Bound> {
        (0..net.len()).map(|i| net.cell(i).supply(rho[i], self.beta[i])).collect()
    }
}

/// Flows `f_ij` over consecutive pairs, with per-cell totals.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatrix {
    /// `rows[i][k]` is the flow from `i` to `net.successors(i)[k]`.
    pub rows: Vec<Vec<f64>>,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
}

impl FlowMatrix {
    pub fn get(&self, net: &Network, i: CellId, j: CellId) -> f64 {
        net.successor_index(i, j).map_or(0.0, |k| self.rows[i][k])
    }

    /// `f^in − f^out` per cell.
    pub fn net_rate(&self) -> Vec<f64> {
        self.inflow.iter().zip(&self.outflow).map(|(a, b)| a - b).collect()
    }
}

/// κ^NF_j: fraction of the demand towards `j` that its supply admits.
fn kappa_nf(supply: Bound, demand_in: f64) -> f64 {
    match supply {
        Bound::Unbounded => 1.0,
        Bound::Finite(s) => {
            if demand_in <= s {
                1.0
            } else {
                s / demand_in
            }
        }
    }
}

fn mid(a: f64, b: f64, c: f64) -> f64 {
    a.max(b).min(a.min(b).max(c))
}

/// Flow matrix at state `rho` with exogenous inflows `lambda` (zero off the
/// on-ramps).
pub fn compute_flows(
    net: &Network,
    policy: &Policy,
    uncontrolled: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    lambda: &[f64],
) -> Result<FlowMatrix, PolicyError> {
    let demand = controls.demand(net, rho);
    let supply = controls.supply(net, rho);
    flows_from(net, policy, controls.turning(uncontrolled), &demand, &supply, lambda)
}

/// Same as [`compute_flows`] with demand and supply already evaluated.
pub fn flows_from(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    demand: &[f64],
    supply: &[Bound],
    lambda: &[f64],
) -> Result<FlowMatrix, PolicyError> {
    let n = net.len();
    for len in [demand.len(), supply.len(), lambda.len(), r.len()] {
        if len != n {
            return Err(PolicyError::Dimension { expected: n, got: len });
        }
    }
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; net.successors(i).len()]).collect();
    let mut kappa: Vec<f64> = Vec::new();

    for v in net.junctions() {
        let ins = net.node_in(v);
        let outs = net.node_out(v);
        if ins.is_empty() || outs.is_empty() {
            continue;
        }
        if let Policy::PriorityMerge { priorities } = policy {
            if ins.len() == 2 && outs.len() == 1 {
                merge_by_priority(ins, outs[0], r, demand, supply, priorities, &mut rows);
                continue;
            }
            if ins.len() > 2 || (outs.len() > 1 && ins.len() > 1) {
                return Err(PolicyError::Topology {
                    node: v,
                    reason: "priority merge needs merge/diverge junctions with at most 2 inputs".into(),
                });
            }
        }
        if matches!(policy, Policy::LineCtm) && (ins.len() > 1 || outs.len() > 1) {
            return Err(PolicyError::Topology {
                node: v,
                reason: "line rule needs one incoming and one outgoing cell".into(),
            });
        }

        kappa.clear();
        for &j in outs {
            let demand_in: f64 = ins.iter().map(|&i| r.get(i, j) * demand[i]).sum();
            kappa.push(kappa_nf(supply[j], demand_in));
        }
        let kf = kappa.iter().copied().fold(1.0, f64::min);
        let theta = match policy {
            Policy::Fifo => 1.0,
            Policy::Mixture { theta } => *theta,
            _ => 0.0,
        };
        for (slot, &j) in outs.iter().enumerate() {
            let knf = kappa[slot];
            let k = if theta == 0.0 || kf == knf {
                knf
            } else if theta == 1.0 {
                kf
            } else {
                theta * kf + (1.0 - theta) * knf
            };
            for &i in ins {
                let Some(pos) = net.successor_index(i, j) else { continue };
                let rd = r.row(i)[pos].1 * demand[i];
                rows[i][pos] = if k == 1.0 { rd } else { k * rd };
            }
        }
    }

    let mut inflow = vec![0.0; n];
    let mut outflow = vec![0.0; n];
    for i in 0..n {
        for (pos, &j) in net.successors(i).iter().enumerate() {
            inflow[j] += rows[i][pos];
            outflow[i] += rows[i][pos];
        }
    }
    for i in 0..n {
        if net.is_on_ramp(i) {
            inflow[i] = lambda[i];
        }
        if net.is_off_ramp(i) {
            outflow[i] = demand[i];
        }
    }
    Ok(FlowMatrix { rows, inflow, outflow })
}

fn merge_by_priority(
    ins: &[CellId],
    j: CellId,
    r: &TurningMatrix,
    demand: &[f64],
    supply: &[Bound],
    priorities: &[f64],
    rows: &mut [Vec<f64>],
) {
    let (i, k) = (ins[0], ins[1]);
    let di = r.get(i, j) * demand[i];
    let dk = r.get(k, j) * demand[k];
    let (fi, fk) = match supply[j] {
        Bound::Finite(s) if di + dk > s => (
            mid(di, s - dk, priorities[i] * s),
            mid(dk, s - di, priorities[k] * s),
        ),
        _ => (di, dk),
    };
    // merge nodes have a single outgoing cell, so the slot is 0
    rows[i][0] = fi;
    rows[k][0] = fk;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Negative,
    /// `f_ij ≤ R_ij d_i`.
    TurningDemand,
    /// `Σ_k f_kj ≤ s_j`.
    Supply,
    /// With enough supply at a node every flow must equal `R_ij d_i`.
    FreeFlow,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::Negative => "negative flow",
            ConstraintKind::TurningDemand => "flow above turning demand",
            ConstraintKind::Supply => "inflow above supply",
            ConstraintKind::FreeFlow => "free-flow node not at demand",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintViolation {
    pub kind: ConstraintKind,
    pub from: Option<CellId>,
    pub to: CellId,
    pub excess: f64,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.from {
            Some(i) => write!(f, "{} on ({i}, {}) by {:e}", self.kind, self.to, self.excess),
            None => write!(f, "{} at cell {} by {:e}", self.kind, self.to, self.excess),
        }
    }
}

/// Checks a flow matrix against the demand, supply and free-flow constraints.
pub fn check_constraints(
    net: &Network,
    flows: &FlowMatrix,
    uncontrolled: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    tol: f64,
) -> Vec<ConstraintViolation> {
    let r = controls.turning(uncontrolled);
    let demand = controls.demand(net, rho);
    let supply = controls.supply(net, rho);
    let mut out = Vec::new();
    let mut total_in = vec![0.0; net.len()];
    for i in 0..net.len() {
        for (pos, &(j, rij)) in r.row(i).iter().enumerate() {
            let f = flows.rows[i][pos];
            total_in[j] += f;
            if f < -tol {
                out.push(ConstraintViolation { kind: ConstraintKind::Negative, from: Some(i), to: j, excess: -f });
            }
            let cap = rij * demand[i];
            if f > cap + tol {
                out.push(ConstraintViolation {
                    kind: ConstraintKind::TurningDemand,
                    from: Some(i),
                    to: j,
                    excess: f - cap,
                });
            }
        }
    }
    for j in 0..net.len() {
        if let Bound::Finite(s) = supply[j] {
            if total_in[j] > s + tol {
                out.push(ConstraintViolation { kind: ConstraintKind::Supply, from: None, to: j, excess: total_in[j] - s });
            }
        }
    }
    for v in net.junctions() {
        let ins = net.node_in(v);
        let outs = net.node_out(v);
        let free = outs.iter().all(|&j| {
            let want: f64 = ins.iter().map(|&i| r.get(i, j) * demand[i]).sum();
            supply[j].admits(want)
        });
        if !free {
            continue;
        }
        for &i in ins {
            for (pos, &(j, rij)) in r.row(i).iter().enumerate() {
                let gap = (flows.rows[i][pos] - rij * demand[i]).abs();
                if gap > tol {
                    out.push(ConstraintViolation { kind: ConstraintKind::FreeFlow, from: Some(i), to: j, excess: gap });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSide {
    Inflow,
    Outflow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityViolation {
    /// Cell whose total flow moved the wrong way.
    pub cell: CellId,
    /// Cell whose volume was perturbed.
    pub wrt: CellId,
    pub side: FlowSide,
    pub derivative: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonotonicityReport {
    pub violations: Vec<MonotonicityViolation>,
    /// Derivatives skipped because a kink lies within the step.
    pub inconclusive: usize,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Finite-difference step used by the derivative-based diagnostics.
pub fn fd_step(rho: f64) -> f64 {
    1e-4 * rho.abs().max(1.0)
}

/// Sign test of `∂f^in_i/∂ρ_j ≥ 0` and `∂f^out_i/∂ρ_j ≤ 0` for `j ≠ i` by
/// central differences. `step` scales the default step.
pub fn check_monotonicity(
    net: &Network,
    policy: &Policy,
    uncontrolled: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    lambda: &[f64],
    step: f64,
) -> Result<MonotonicityReport, PolicyError> {
    const TOL: f64 = 1e-8;
    let n = net.len();
    let base = compute_flows(net, policy, uncontrolled, controls, rho, lambda)?;
    let mut report = MonotonicityReport::default();
    let mut x = rho.to_vec();
    for j in 0..n {
        let h = step * fd_step(rho[j]);
        x[j] = rho[j] + h;
        let up = compute_flows(net, policy, uncontrolled, controls, &x, lambda)?;
        x[j] = rho[j] - h;
        let down = compute_flows(net, policy, uncontrolled, controls, &x, lambda)?;
        x[j] = rho[j];
        for i in (0..n).filter(|&i| i != j) {
            for side in [FlowSide::Inflow, FlowSide::Outflow] {
                let pick = |f: &FlowMatrix| match side {
                    FlowSide::Inflow => f.inflow[i],
                    FlowSide::Outflow => f.outflow[i],
                };
                let fwd = (pick(&up) - pick(&base)) / h;
                let bwd = (pick(&base) - pick(&down)) / h;
                let scale = 1.0 + fwd.abs().max(bwd.abs());
                if (fwd - bwd).abs() > 1e-6 * scale {
                    report.inconclusive += 1;
                    continue;
                }
                let der = 0.5 * (fwd + bwd);
                let bad = match side {
                    FlowSide::Inflow => der < -TOL,
                    FlowSide::Outflow => der > TOL,
                };
                if bad {
                    report.violations.push(MonotonicityViolation { cell: i, wrt: j, side, derivative: der });
                }
            }
        }
    }
    Ok(report)
}
