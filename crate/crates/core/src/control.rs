//! Choosing equilibria and trajectories by linear programming, and turning a
//! chosen point into demand, supply and turning controls that realize it.
//!
//! A point is a pair `(x, y)` of cell volumes and pairwise flows, with
//! `y[i][k]` the flow from `i` to `net.successors(i)[k]`. The feasible set
//! asks for flows below every uncontrolled demand and supply, conservation at
//! internal cells, on-ramps that pass their arrivals and off-ramps that can
//! discharge what they receive.

use std::io::{self, Write};

use thiserror::Error;

use crate::analysis::{dual_graph, is_rooted, AnalysisError, Rootedness};
use crate::lp::{solve_with, Backend, Cmp, LinearProgram, LpError, LpSolution, Status, VarId};
use crate::network::{Bound, CellId, Incident, Inflows, Network, NodeId, TurningMatrix, EXTERNAL};
use crate::policy::{compute_flows, Controls, Policy, PolicyError};
use crate::sim::{cfl_number, l1, simulate, ControlSchedule, SimConfig, SimError, Trajectory};

/// Relative slack allowed when checking a point against the feasible set.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Largest `|ẋ_i|` accepted when verifying a controlled equilibrium.
pub const VERIFY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("selection problem is {0:?}")]
    NotOptimal(Status),
    #[error("point outside the feasible set: {0}")]
    Infeasible(String),
    #[error("node {0} is neither a merge nor a diverge")]
    NotMergeDiverge(NodeId),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Cost of a state.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `Σ η_i x_i` with `η ≥ 0`, not all zero.
    Weighted(Vec<f64>),
    /// `−Σ d_e(x_e)` over off-ramps: discharge as fast as possible.
    Evacuation,
}

impl Objective {
    pub fn total_volume(net: &Network) -> Objective {
        Objective::Weighted(vec![1.0; net.len()])
    }

    /// Per-cell linear cost coefficients.
    pub fn weights(&self, net: &Network) -> Result<Vec<f64>, ControlError> {
        match self {
            Objective::Weighted(eta) => {
                if eta.len() != net.len() {
                    return Err(ControlError::Invalid(format!("{} weights for {} cells", eta.len(), net.len())));
                }
                if eta.iter().any(|&e| !(e.is_finite() && e >= 0.0)) {
                    return Err(ControlError::Invalid("weights must be finite and nonnegative".into()));
                }
                if eta.iter().all(|&e| e == 0.0) {
                    return Err(ControlError::Invalid("weights are all zero".into()));
                }
                Ok(eta.clone())
            }
            Objective::Evacuation => Ok((0..net.len())
                .map(|i| if net.is_off_ramp(i) { -net.cell(i).demand_coeff() } else { 0.0 })
                .collect()),
        }
    }
}

/// Volumes and pairwise flows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasiblePoint {
    pub x: Vec<f64>,
    pub y: Vec<Vec<f64>>,
}

impl FeasiblePoint {
    pub fn flow(&self, net: &Network, i: CellId, j: CellId) -> f64 {
        net.successor_index(i, j).map_or(0.0, |k| self.y[i][k])
    }

    fn inflow(&self, net: &Network, j: CellId) -> f64 {
        net.predecessors(j).iter().map(|&i| self.flow(net, i, j)).sum()
    }

    fn outflow(&self, i: CellId) -> f64 {
        self.y[i].iter().sum()
    }
}

fn require_affine(net: &Network) -> Result<(), ControlError> {
    match (0..net.len()).find(|&i| !net.cell(i).is_affine()) {
        Some(i) => Err(ControlError::Unsupported(format!("cell {i} has a non-affine demand or supply"))),
        None => Ok(()),
    }
}

fn check_dims(net: &Network, p: &FeasiblePoint) -> Result<(), ControlError> {
    let ok = p.x.len() == net.len()
        && p.y.len() == net.len()
        && (0..net.len()).all(|i| p.y[i].len() == net.successors(i).len());
    if ok {
        Ok(())
    } else {
        Err(ControlError::Invalid("point does not match the network".into()))
    }
}

/// Largest scaled violation of the feasible set and where it occurs. With
/// `lambda = None` only the pointwise demand and supply bounds are checked,
/// which is what a point along a trajectory has to satisfy.
pub fn feasibility_violation(
    net: &Network,
    r: &TurningMatrix,
    lambda: Option<&[f64]>,
    p: &FeasiblePoint,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut note = |excess: f64, scale: f64, what: &dyn Fn() -> String| {
        let v = excess / (1.0 + scale.abs());
        if v > worst.0 {
            worst = (v, what());
        }
    };
    for i in 0..net.len() {
        let cell = net.cell(i);
        note(-p.x[i], 0.0, &|| format!("negative volume in cell {i}"));
        if let Bound::Finite(b) = cell.jam {
            note(p.x[i] - b, b, &|| format!("cell {i} above its jam volume"));
        }
        let d = cell.uncontrolled_demand(p.x[i]);
        for (k, &j) in net.successors(i).iter().enumerate() {
            let y = p.y[i][k];
            note(-y, 0.0, &|| format!("negative flow {i} -> {j}"));
            let cap = r.get(i, j) * d;
            note(y - cap, cap, &|| format!("flow {i} -> {j} above the turning demand"));
        }
        let fin = p.inflow(net, i);
        if let Bound::Finite(s) = cell.uncontrolled_supply(p.x[i]) {
            if !net.predecessors(i).is_empty() {
                note(fin - s, s, &|| format!("inflow to cell {i} above its supply"));
            }
        }
        let Some(lambda) = lambda else { continue };
        let fout = p.outflow(i);
        if net.is_on_ramp(i) {
            note((lambda[i] - fout).abs(), lambda[i], &|| format!("on-ramp {i} does not pass its arrivals"));
        } else if net.is_off_ramp(i) {
            note(fin - d, d, &|| format!("off-ramp {i} receives more than it discharges"));
        } else {
            note((fin - fout).abs(), fin, &|| format!("flow not conserved at cell {i}"));
        }
    }
    worst
}

pub fn check_feasible(
    net: &Network,
    r: &TurningMatrix,
    lambda: Option<&[f64]>,
    p: &FeasiblePoint,
) -> Result<(), ControlError> {
    check_dims(net, p)?;
    let (v, what) = feasibility_violation(net, r, lambda, p);
    if v > FEASIBILITY_TOL {
        return Err(ControlError::Infeasible(format!("{what} (scaled excess {v:.3e})")));
    }
    Ok(())
}

fn state_in_range(net: &Network, rho: &[f64]) -> Result<(), ControlError> {
    if rho.len() != net.len() {
        return Err(ControlError::Invalid(format!("{} volumes for {} cells", rho.len(), net.len())));
    }
    for (i, &x) in rho.iter().enumerate() {
        let over = net.cell(i).jam.finite().is_some_and(|b| x > b * (1.0 + 1e-9) + 1e-9);
        if !x.is_finite() || x < -1e-9 || over {
            return Err(ControlError::Invalid(format!("initial volume {x} of cell {i} outside [0, B]")));
        }
    }
    Ok(())
}

/// An LP over one point: `x[i]` and `y[i][k]` name its variables.
#[derive(Clone, Debug)]
pub struct PointLp {
    pub lp: LinearProgram,
    pub x: Vec<VarId>,
    pub y: Vec<Vec<VarId>>,
}

impl PointLp {
    pub fn point(&self, sol: &LpSolution) -> FeasiblePoint {
        FeasiblePoint {
            x: self.x.iter().map(|&v| sol.x[v]).collect(),
            y: self.y.iter().map(|row| row.iter().map(|&v| sol.x[v]).collect()).collect(),
        }
    }
}

fn add_point_vars(lp: &mut LinearProgram, net: &Network, tag: &str, lower: &[f64], upper: &[f64]) -> (Vec<VarId>, Vec<Vec<VarId>>) {
    let x = (0..net.len())
        .map(|i| lp.add_var(format!("x{tag}_{i}"), 0.0, lower[i], upper[i]))
        .collect();
    let y = (0..net.len())
        .map(|i| {
            net.successors(i)
                .iter()
                .map(|&j| lp.add_var(format!("y{tag}_{i}_{j}"), 0.0, 0.0, f64::INFINITY))
                .collect()
        })
        .collect();
    (x, y)
}

fn jam_bounds(net: &Network) -> (Vec<f64>, Vec<f64>) {
    let upper = net.cells().iter().map(|c| c.jam.finite().unwrap_or(f64::INFINITY)).collect();
    (vec![0.0; net.len()], upper)
}

/// `y_ij ≤ R_ij d_i(x_i)` and `Σ_i y_ij ≤ s_j(x_j)` for affine cells.
fn add_flow_bounds(lp: &mut LinearProgram, net: &Network, r: &TurningMatrix, x: &[VarId], y: &[Vec<VarId>], tag: &str) {
    for i in 0..net.len() {
        let dc = net.cell(i).demand_coeff();
        for (k, &j) in net.successors(i).iter().enumerate() {
            let rij = r.get(i, j);
            lp.add_constraint(format!("demand{tag}_{i}_{j}"), vec![(y[i][k], 1.0), (x[i], -rij * dc)], Cmp::Le, 0.0);
        }
    }
    for j in 0..net.len() {
        let preds = net.predecessors(j);
        if preds.is_empty() {
            continue;
        }
        let into: Vec<(VarId, f64)> = preds
            .iter()
            .map(|&i| (y[i][net.successor_index(i, j).expect("predecessor")], 1.0))
            .collect();
        let cell = net.cell(j);
        if let Bound::Finite(b) = cell.jam {
            let wc = cell.supply_coeff();
            let mut terms = into.clone();
            terms.push((x[j], wc));
            lp.add_constraint(format!("supply{tag}_{j}"), terms, Cmp::Le, wc * b);
        }
        if let Bound::Finite(s) = cell.saturation {
            lp.add_constraint(format!("saturation{tag}_{j}"), into, Cmp::Le, s);
        }
    }
}

fn into_terms(net: &Network, y: &[Vec<VarId>], j: CellId, coeff: f64) -> Vec<(VarId, f64)> {
    net.predecessors(j)
        .iter()
        .map(|&i| (y[i][net.successor_index(i, j).expect("predecessor")], coeff))
        .collect()
}

/// Equilibrium selection: minimize the objective over the feasible set.
pub fn build_equilibrium_lp(
    net: &Network,
    r: &TurningMatrix,
    lambda: &[f64],
    objective: &Objective,
) -> Result<PointLp, ControlError> {
    require_affine(net)?;
    if lambda.len() != net.len() {
        return Err(ControlError::Invalid(format!("{} arrival rates for {} cells", lambda.len(), net.len())));
    }
    let eta = objective.weights(net)?;
    let mut lp = LinearProgram::new();
    let (lo, hi) = jam_bounds(net);
    let (x, y) = add_point_vars(&mut lp, net, "", &lo, &hi);
    for (i, &e) in eta.iter().enumerate() {
        lp.set_cost(x[i], e);
    }
    add_flow_bounds(&mut lp, net, r, &x, &y, "");
    for i in 0..net.len() {
        let out: Vec<(VarId, f64)> = y[i].iter().map(|&v| (v, 1.0)).collect();
        if net.is_on_ramp(i) {
            lp.add_constraint(format!("arrivals_{i}"), out, Cmp::Eq, lambda[i]);
        } else if net.is_off_ramp(i) {
            let mut terms = into_terms(net, &y, i, 1.0);
            terms.push((x[i], -net.cell(i).demand_coeff()));
            lp.add_constraint(format!("discharge_{i}"), terms, Cmp::Le, 0.0);
        } else {
            let mut terms = into_terms(net, &y, i, 1.0);
            terms.extend(out.iter().map(|&(v, _)| (v, -1.0)));
            lp.add_constraint(format!("conserve_{i}"), terms, Cmp::Eq, 0.0);
        }
    }
    Ok(PointLp { lp, x, y })
}

fn require_merge_diverge(net: &Network) -> Result<(), ControlError> {
    for v in net.junctions() {
        if net.node_in(v).len() > 1 && net.node_out(v).len() > 1 {
            return Err(ControlError::NotMergeDiverge(v));
        }
    }
    Ok(())
}

/// Strict diverge: one incoming cell, several outgoing ones. A node with one
/// cell on each side counts as a merge.
fn is_diverge(net: &Network, v: NodeId) -> bool {
    v != EXTERNAL && net.node_in(v).len() == 1 && net.node_out(v).len() > 1
}

fn is_merge(net: &Network, v: NodeId) -> bool {
    v != EXTERNAL && net.node_out(v).len() == 1
}

/// Equilibrium selection when the cells in `uncontrolled` carry no control.
/// Their flows are pinned to what an uncontrolled junction would produce: a
/// cell fed by a diverge receives its full supply and a cell entering a merge
/// sends its full demand.
pub fn build_partial_control_lp(
    net: &Network,
    r: &TurningMatrix,
    lambda: &[f64],
    objective: &Objective,
    uncontrolled: &[CellId],
) -> Result<PointLp, ControlError> {
    require_merge_diverge(net)?;
    let mut p = build_equilibrium_lp(net, r, lambda, objective)?;
    for &c in uncontrolled {
        if c >= net.len() {
            return Err(ControlError::Invalid(format!("unknown cell {c}")));
        }
        let cell = net.cell(c);
        if is_diverge(net, net.tail(c)) {
            let i = net.node_in(net.tail(c))[0];
            let k = net.successor_index(i, c).expect("diverge successor");
            let Bound::Finite(b) = cell.jam else {
                return Err(ControlError::Unsupported(format!("cell {c} has no jam volume")));
            };
            if cell.saturation.finite().is_some() {
                return Err(ControlError::Unsupported(format!("cell {c} has a saturation flow")));
            }
            let wc = cell.supply_coeff();
            p.lp.add_constraint(format!("free_supply_{c}"), vec![(p.y[i][k], 1.0), (p.x[c], wc)], Cmp::Eq, wc * b);
        }
        if is_merge(net, net.head(c)) {
            let dc = cell.demand_coeff();
            p.lp.add_constraint(format!("free_demand_{c}"), vec![(p.y[c][0], 1.0), (p.x[c], -dc)], Cmp::Eq, 0.0);
        }
    }
    Ok(p)
}

fn solve_point(p: &PointLp, backend: Backend) -> Result<(FeasiblePoint, f64), ControlError> {
    let sol = solve_with(&p.lp, backend)?;
    if !sol.is_optimal() {
        return Err(ControlError::NotOptimal(sol.status));
    }
    Ok((p.point(&sol), sol.objective))
}

/// Controls from any point: each cell sends `y_ij` to `j` through its demand
/// throttle and turning split, supplies are left alone.
///
/// An empty cell gets `α = 0` and a uniform split. Ratios `y_ij / d_i(x_i)`
/// are clipped to `R^u_ij` first, so `α_i R_ij ≤ R^u_ij` holds exactly.
pub fn extract_controls_case1(
    net: &Network,
    r: &TurningMatrix,
    lambda: Option<&[f64]>,
    p: &FeasiblePoint,
) -> Result<Controls, ControlError> {
    check_feasible(net, r, lambda, p)?;
    let n = net.len();
    let mut alpha = vec![1.0; n];
    let mut turning = r.clone();
    for i in 0..n {
        let succ = net.successors(i);
        if net.is_off_ramp(i) || succ.is_empty() {
            continue;
        }
        let d = net.cell(i).uncontrolled_demand(p.x[i]);
        let q: Vec<f64> = if p.x[i] > 0.0 && d > 0.0 {
            succ.iter()
                .enumerate()
                .map(|(k, &j)| (p.y[i][k].max(0.0) / d).min(r.get(i, j)))
                .collect()
        } else {
            vec![0.0; succ.len()]
        };
        let a: f64 = q.iter().sum();
        if a > 0.0 {
            alpha[i] = a.min(1.0);
            turning.set_row(i, &q.iter().map(|v| v / a).collect::<Vec<_>>());
        } else {
            alpha[i] = 0.0;
            turning.set_row(i, &vec![1.0 / succ.len() as f64; succ.len()]);
        }
    }
    Ok(Controls { alpha, beta: vec![Bound::Unbounded; n], turning: Some(turning) })
}

/// Controls for merge/diverge networks that keep the uncontrolled turning
/// split: demand throttles on cells entering a merge, supply throttles on
/// cells leaving a diverge. Cells in `uncontrolled` are left free.
pub fn extract_controls_case2(
    net: &Network,
    r: &TurningMatrix,
    lambda: Option<&[f64]>,
    p: &FeasiblePoint,
    uncontrolled: &[CellId],
) -> Result<Controls, ControlError> {
    require_merge_diverge(net)?;
    check_feasible(net, r, lambda, p)?;
    let n = net.len();
    let mut c = Controls::identity(n);
    for i in 0..n {
        if uncontrolled.contains(&i) {
            continue;
        }
        if !net.is_off_ramp(i) && is_merge(net, net.head(i)) {
            let d = net.cell(i).uncontrolled_demand(p.x[i]);
            c.alpha[i] = if p.x[i] > 0.0 && d > 0.0 { (p.y[i][0] / d).clamp(0.0, 1.0) } else { 0.0 };
        }
        if !net.is_on_ramp(i) && is_diverge(net, net.tail(i)) {
            let j = net.node_in(net.tail(i))[0];
            c.beta[i] = Bound::Finite(p.flow(net, j, i).max(0.0));
        }
    }
    Ok(c)
}

/// Which extraction to apply to a selected equilibrium.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Extraction {
    /// Demand throttles and turning splits on every cell.
    #[default]
    Turning,
    /// Demand and supply throttles at merges and diverges.
    Junction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumSelection {
    pub point: FeasiblePoint,
    pub objective: f64,
    pub controls: Controls,
}

/// Solves the selection problem and extracts controls for its optimum.
pub fn select_equilibrium(
    net: &Network,
    r: &TurningMatrix,
    lambda: &[f64],
    objective: &Objective,
    extraction: Extraction,
    backend: Backend,
) -> Result<EquilibriumSelection, ControlError> {
    if extraction == Extraction::Junction {
        require_merge_diverge(net)?;
    }
    let p = build_equilibrium_lp(net, r, lambda, objective)?;
    let (point, value) = solve_point(&p, backend)?;
    let controls = match extraction {
        Extraction::Turning => extract_controls_case1(net, r, Some(lambda), &point)?,
        Extraction::Junction => extract_controls_case2(net, r, Some(lambda), &point, &[])?,
    };
    Ok(EquilibriumSelection { point, objective: value, controls })
}

/// Selection with some cells uncontrolled; always uses junction controls.
pub fn select_partial(
    net: &Network,
    r: &TurningMatrix,
    lambda: &[f64],
    objective: &Objective,
    uncontrolled: &[CellId],
    backend: Backend,
) -> Result<EquilibriumSelection, ControlError> {
    let p = build_partial_control_lp(net, r, lambda, objective, uncontrolled)?;
    let (point, value) = solve_point(&p, backend)?;
    let controls = extract_controls_case2(net, r, Some(lambda), &point, uncontrolled)?;
    Ok(EquilibriumSelection { point, objective: value, controls })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// `max_i |ẋ_i|` at the selected state under the controls.
    pub residual: f64,
    pub worst_cell: Option<CellId>,
    pub passed: bool,
    pub rooted: Rootedness,
}

/// Checks that `x` is stationary for the controlled dynamics and whether
/// the controlled dual graph is rooted there.
pub fn verify_controlled_equilibrium(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    controls: &Controls,
    x: &[f64],
    lambda: &[f64],
) -> Result<Verification, ControlError> {
    let flows = compute_flows(net, policy, r, controls, x, lambda)?;
    let rate = flows.net_rate();
    let worst = (0..net.len()).max_by(|&a, &b| rate[a].abs().total_cmp(&rate[b].abs()));
    let residual = worst.map_or(0.0, |i| rate[i].abs());
    let g = dual_graph(net, policy, r, controls, x, lambda, 1.0)?;
    let off: Vec<CellId> = net.off_ramps().collect();
    Ok(Verification {
        residual,
        worst_cell: worst.filter(|_| residual > 0.0),
        passed: residual <= VERIFY_TOL,
        rooted: is_rooted(&g, &off),
    })
}

/// Uncontrolled turning preferences over time; the first piece also covers
/// earlier times.
#[derive(Clone, Debug, PartialEq)]
pub struct TurningSchedule {
    pieces: Vec<(f64, TurningMatrix)>,
}

impl TurningSchedule {
    pub fn constant(r: TurningMatrix) -> TurningSchedule {
        TurningSchedule { pieces: vec![(f64::NEG_INFINITY, r)] }
    }

    /// Appends a piece; starts must increase.
    pub fn push(&mut self, start: f64, r: TurningMatrix) {
        debug_assert!(self.pieces.last().is_none_or(|p| p.0 < start));
        self.pieces.push((start, r));
    }

    pub fn at(&self, t: f64) -> &TurningMatrix {
        let k = self.pieces.partition_point(|p| p.0 <= t + 1e-9);
        &self.pieces[k.saturating_sub(1)].1
    }
}

/// How an off-ramp's volume may evolve in the horizon problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OffRampRule {
    /// `x(k+1) ≤ x(k) + dt (inflow − d(x(k)))`: the selection may clear an
    /// off-ramp faster than it physically drains.
    #[default]
    Inequality,
    /// Off-ramps follow their own dynamics exactly.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonOptions {
    /// Minutes.
    pub start: f64,
    /// Minutes, a multiple of `dt`.
    pub horizon: f64,
    /// Minutes.
    pub dt: f64,
    pub off_ramp: OffRampRule,
    /// Replace the initial state by the wrap-around `x(0) = x(K)`.
    pub periodic: bool,
}

impl HorizonOptions {
    pub fn new(start: f64, horizon: f64, dt: f64) -> HorizonOptions {
        HorizonOptions { start, horizon, dt, off_ramp: OffRampRule::default(), periodic: false }
    }

    pub fn steps(&self) -> Result<usize, ControlError> {
        let k = (self.horizon / self.dt).round();
        if !(self.dt > 0.0) || k < 1.0 || (k * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(ControlError::Invalid(format!(
                "horizon {} is not a positive multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(k as usize)
    }
}

/// Forward-Euler horizon problem: `x[k]` for `k = 0..=K`, `y[k]` for `k < K`.
#[derive(Clone, Debug)]
pub struct HorizonLp {
    pub lp: LinearProgram,
    pub start: f64,
    pub dt: f64,
    pub x: Vec<Vec<VarId>>,
    pub y: Vec<Vec<Vec<VarId>>>,
}

impl HorizonLp {
    pub fn steps(&self) -> usize {
        self.y.len()
    }

    pub fn solution(&self, sol: &LpSolution) -> HorizonSolution {
        HorizonSolution {
            start: self.start,
            dt: self.dt,
            x: self.x.iter().map(|xk| xk.iter().map(|&v| sol.x[v]).collect()).collect(),
            y: self
                .y
                .iter()
                .map(|yk| yk.iter().map(|row| row.iter().map(|&v| sol.x[v]).collect()).collect())
                .collect(),
            objective: sol.objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonSolution {
    pub start: f64,
    pub dt: f64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<Vec<f64>>>,
    pub objective: f64,
}

impl HorizonSolution {
    pub fn point(&self, k: usize) -> FeasiblePoint {
        FeasiblePoint { x: self.x[k].clone(), y: self.y[k].clone() }
    }

    /// Turning-split controls realizing each step, as a schedule.
    pub fn schedule(&self, net: &Network, turning: &TurningSchedule) -> Result<ControlSchedule, ControlError> {
        let mut s = ControlSchedule::identity();
        for k in 0..self.y.len() {
            let t = self.start + k as f64 * self.dt;
            s.push(t, extract_controls_case1(net, turning.at(t), None, &self.point(k))?);
        }
        Ok(s)
    }
}

/// Horizon problem minimizing `dt Σ_k Ψ(x(k))` over the states of the
/// window (the terminal one included unless the problem is periodic).
pub fn build_horizon_lp(
    net: &Network,
    turning: &TurningSchedule,
    inflows: &Inflows,
    rho0: Option<&[f64]>,
    opts: &HorizonOptions,
    objective: &Objective,
) -> Result<HorizonLp, ControlError> {
    require_affine(net)?;
    let steps = opts.steps()?;
    let eta = objective.weights(net)?;
    match (rho0, opts.periodic) {
        (Some(r0), false) => state_in_range(net, r0)?,
        (None, true) => {}
        (Some(_), true) => return Err(ControlError::Invalid("periodic problems take no initial state".into())),
        (None, false) => return Err(ControlError::Invalid("initial state required".into())),
    }
    let n = net.len();
    let dt = opts.dt;
    let mut lp = LinearProgram::new();
    let (lo, hi) = jam_bounds(net);
    let mut xs: Vec<Vec<VarId>> = Vec::with_capacity(steps + 1);
    let mut ys: Vec<Vec<Vec<VarId>>> = Vec::with_capacity(steps);
    for k in 0..=steps {
        let costed = k < steps || !opts.periodic;
        let xk: Vec<VarId> = (0..n)
            .map(|i| {
                let (l, h) = match (k, rho0) {
                    (0, Some(r0)) => (r0[i].max(0.0), r0[i].max(0.0)),
                    _ => (lo[i], hi[i]),
                };
                lp.add_var(format!("x{k}_{i}"), if costed { dt * eta[i] } else { 0.0 }, l, h)
            })
            .collect();
        xs.push(xk);
    }
    let mut lambda = vec![0.0; n];
    for k in 0..steps {
        let t = opts.start + k as f64 * dt;
        let r = turning.at(t);
        inflows.at_into(t, &mut lambda);
        let yk: Vec<Vec<VarId>> = (0..n)
            .map(|i| {
                net.successors(i)
                    .iter()
                    .map(|&j| lp.add_var(format!("y{k}_{i}_{j}"), 0.0, 0.0, f64::INFINITY))
                    .collect()
            })
            .collect();
        add_flow_bounds(&mut lp, net, r, &xs[k], &yk, &k.to_string());
        for i in 0..n {
            let mut terms = vec![(xs[k + 1][i], 1.0), (xs[k][i], -1.0)];
            terms.extend(into_terms(net, &yk, i, -dt));
            terms.extend(yk[i].iter().map(|&v| (v, dt)));
            let name = format!("dyn{k}_{i}");
            if net.is_on_ramp(i) {
                lp.add_constraint(name, terms, Cmp::Eq, dt * lambda[i]);
            } else if net.is_off_ramp(i) {
                terms[1].1 += dt * net.cell(i).demand_coeff();
                let cmp = match opts.off_ramp {
                    OffRampRule::Inequality => Cmp::Le,
                    OffRampRule::Exact => Cmp::Eq,
                };
                lp.add_constraint(name, terms, cmp, 0.0);
            } else {
                lp.add_constraint(name, terms, Cmp::Eq, 0.0);
            }
        }
        ys.push(yk);
    }
    if opts.periodic {
        for i in 0..n {
            lp.add_constraint(format!("wrap_{i}"), vec![(xs[0][i], 1.0), (xs[steps][i], -1.0)], Cmp::Eq, 0.0);
        }
    }
    Ok(HorizonLp { lp, start: opts.start, dt, x: xs, y: ys })
}

pub fn solve_horizon(h: &HorizonLp, backend: Backend) -> Result<HorizonSolution, ControlError> {
    let sol = solve_with(&h.lp, backend)?;
    if !sol.is_optimal() {
        return Err(ControlError::NotOptimal(sol.status));
    }
    Ok(h.solution(&sol))
}

/// `Σ_k (t_{k+1} − t_k) Σ_i ρ_i(t_k)`: vehicle-minutes spent in the network.
pub fn volume_cost(traj: &Trajectory) -> f64 {
    traj.times
        .windows(2)
        .zip(&traj.states)
        .map(|(t, s)| (t[1] - t[0]) * s.iter().sum::<f64>())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcOptions {
    /// Minutes between re-solves, also the look-ahead.
    pub horizon: f64,
    /// Minutes.
    pub dt: f64,
    /// Minutes.
    pub duration: f64,
    pub objective: Objective,
    pub off_ramp: OffRampRule,
    pub policy: Policy,
    pub backend: Backend,
    pub incidents: Vec<Incident>,
}

impl MpcOptions {
    pub fn new(net: &Network, horizon: f64, dt: f64, duration: f64) -> MpcOptions {
        MpcOptions {
            horizon,
            dt,
            duration,
            objective: Objective::total_volume(net),
            off_ramp: OffRampRule::default(),
            policy: Policy::NonFifo,
            backend: Backend::Auto,
            incidents: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcOutcome {
    pub trajectory: Trajectory,
    pub schedule: ControlSchedule,
    /// [`volume_cost`] of the trajectory.
    pub cost: f64,
    pub solves: usize,
    /// Variables and rows of the first horizon problem.
    pub lp_size: (usize, usize),
    /// Set when a horizon problem could not be solved; the trajectory stops there.
    pub aborted: Option<String>,
}

/// Receding-horizon control: every `horizon` minutes the horizon problem is
/// solved from the observed state, its per-step controls are applied for the
/// whole window and the plant is simulated under `policy`.
pub fn mpc_loop(
    net: &Network,
    turning: &TurningSchedule,
    inflows: &Inflows,
    rho0: &[f64],
    opts: &MpcOptions,
) -> Result<MpcOutcome, ControlError> {
    let windows = (opts.duration / opts.horizon).round();
    if !(opts.horizon > 0.0) || windows < 1.0 || (windows * opts.horizon - opts.duration).abs() > 1e-9 * opts.duration {
        return Err(ControlError::Invalid(format!(
            "duration {} is not a multiple of the horizon {}",
            opts.duration, opts.horizon
        )));
    }
    let cfl = cfl_number(net, opts.dt);
    if cfl > 1.0 + 1e-12 {
        return Err(SimError::Cfl(cfl).into());
    }
    state_in_range(net, rho0)?;
    let mut incidents = opts.incidents.clone();
    incidents.sort_by(|a, b| a.time.total_cmp(&b.time));

    let mut plant = net.clone();
    let mut applied = 0;
    let mut rho = rho0.to_vec();
    let mut trajectory: Option<Trajectory> = None;
    let mut schedule = ControlSchedule::identity();
    let mut lp_size = (0, 0);
    let mut solves = 0;
    let mut aborted = None;
    for w in 0..windows as usize {
        let t0 = w as f64 * opts.horizon;
        while applied < incidents.len() && incidents[applied].time <= t0 + 1e-9 {
            plant = plant.apply_incident(&incidents[applied]).map_err(SimError::from)?;
            applied += 1;
        }
        let mut hopts = HorizonOptions::new(t0, opts.horizon, opts.dt);
        hopts.off_ramp = opts.off_ramp;
        let h = build_horizon_lp(&plant, turning, inflows, Some(&rho), &hopts, &opts.objective)?;
        if w == 0 {
            lp_size = (h.lp.num_vars(), h.lp.num_constraints());
        }
        let sol = match solve_horizon(&h, opts.backend) {
            Ok(s) => s,
            Err(e) => {
                aborted = Some(format!("window at t = {t0}: {e}"));
                break;
            }
        };
        solves += 1;
        let window_schedule = sol.schedule(&plant, turning)?;
        for (t, c) in window_schedule.pieces() {
            schedule.push(*t, c.clone());
        }
        let mut config = SimConfig::new(opts.policy.clone(), opts.dt, opts.horizon);
        config.start = t0;
        config.schedule = window_schedule;
        config.incidents = incidents[applied..].to_vec();
        let part = simulate(&plant, turning.at(t0), inflows, &config, &rho)?;
        rho = part.last().to_vec();
        match trajectory.as_mut() {
            Some(tr) => tr.extend(part),
            None => trajectory = Some(part),
        }
    }
    let trajectory = trajectory.unwrap_or(Trajectory {
        times: vec![0.0],
        states: vec![rho0.to_vec()],
        flows: None,
        max_conservation_residual: 0.0,
    });
    Ok(MpcOutcome { cost: volume_cost(&trajectory), trajectory, schedule, solves, lp_size, aborted })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSelection {
    pub solution: HorizonSolution,
    /// Controls for one period starting at 0.
    pub schedule: ControlSchedule,
    /// Two periods simulated from the selected initial state.
    pub simulated: Trajectory,
    /// `‖x(T) − x(2T)‖₁` of the simulation.
    pub periodicity: f64,
    /// `‖x*(0) − x*(T)‖₁` of the selection.
    pub wrap: f64,
}

/// Selects a `period`-periodic trajectory and checks it by simulating two
/// periods under the extracted controls. Inflows and turning preferences
/// must themselves repeat with the period.
#[allow(clippy::too_many_arguments)]
pub fn periodic_selection(
    net: &Network,
    turning: &TurningSchedule,
    inflows: &Inflows,
    period: f64,
    dt: f64,
    objective: &Objective,
    off_ramp: OffRampRule,
    policy: &Policy,
    backend: Backend,
) -> Result<PeriodicSelection, ControlError> {
    let mut opts = HorizonOptions::new(0.0, period, dt);
    opts.periodic = true;
    opts.off_ramp = off_ramp;
    let h = build_horizon_lp(net, turning, inflows, None, &opts, objective)?;
    let solution = solve_horizon(&h, backend)?;
    let steps = h.steps();
    let schedule = solution.schedule(net, turning)?;
    let mut twice = ControlSchedule::identity();
    for rep in 0..2 {
        for (t, c) in schedule.pieces() {
            twice.push(t + rep as f64 * period, c.clone());
        }
    }
    let mut config = SimConfig::new(policy.clone(), dt, 2.0 * period);
    config.schedule = twice;
    let x0: Vec<f64> = solution.x[0].iter().map(|v| v.max(0.0)).collect();
    let simulated = simulate(net, turning.at(0.0), inflows, &config, &x0)?;
    let periodicity = l1(&simulated.states[steps], &simulated.states[2 * steps]);
    let wrap = l1(&solution.x[0], &solution.x[steps]);
    Ok(PeriodicSelection { solution, schedule, simulated, periodicity, wrap })
}

/// Control signals as CSV rows `t,kind,cell_i,cell_j,value`, with `kind` one
/// of `alpha`, `beta` or `R` (turning ratio); `cell_j` is empty except for `R`.
pub fn write_control_csv<W: Write>(net: &Network, schedule: &ControlSchedule, mut w: W) -> io::Result<()> {
    writeln!(w, "t,kind,cell_i,cell_j,value")?;
    for (t, c) in schedule.pieces() {
        let t = if t.is_finite() { *t } else { 0.0 };
        for (i, a) in c.alpha.iter().enumerate() {
            writeln!(w, "{t},alpha,{i},,{a}")?;
        }
        for (i, b) in c.beta.iter().enumerate() {
            writeln!(w, "{t},beta,{i},,{b}")?;
        }
        if let Some(r) = &c.turning {
            for i in 0..net.len() {
                for &(j, v) in r.row(i) {
                    writeln!(w, "{t},R,{i},{j},{v}")?;
                }
            }
        }
    }
    Ok(())
}
