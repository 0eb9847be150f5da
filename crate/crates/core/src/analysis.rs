//! Equilibria, local stability and the state-dependent dual graph.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{Bound, CellId, Inflows, Network, TurningMatrix};
use crate::policy::{compute_flows, fd_step, Controls, FlowMatrix, Policy, PolicyError};
use crate::sim::{cfl_number, step, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("I - R^T is singular; some cell cannot reach an off-ramp")]
    Singular,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeFlowEquilibrium {
    /// `(I − Rᵀ)⁻¹ λ`, veh/min.
    pub flow: Vec<f64>,
    /// Volumes with `d_i(ρ_i) = f_i`; present only when every flow is strictly
    /// below capacity.
    pub rho: Option<Vec<f64>>,
    /// Cells with `f_i ≥ C_i`.
    pub overloaded: Vec<CellId>,
}

impl FreeFlowEquilibrium {
    pub fn is_feasible(&self) -> bool {
        self.rho.is_some()
    }
}

/// Solves `(I − Rᵀ) f = λ` and inverts the demand curves.
pub fn free_flow_equilibrium(
    net: &Network,
    r: &TurningMatrix,
    lambda: &[f64],
) -> Result<FreeFlowEquilibrium, AnalysisError> {
    let n = net.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for &(j, rij) in r.row(i) {
            m[(j, i)] -= rij;
        }
    }
    let b = DVector::from_column_slice(lambda);
    let flow = m.lu().solve(&b).ok_or(AnalysisError::Singular)?;
    let flow: Vec<f64> = flow.iter().copied().collect();
    let overloaded: Vec<CellId> = (0..n)
        .filter(|&i| match net.cell(i).capacity() {
            Bound::Finite(c) => flow[i] >= c,
            Bound::Unbounded => false,
        })
        .collect();
    let rho = if overloaded.is_empty() {
        (0..n).map(|i| net.cell(i).demand_inverse(flow[i])).collect::<Option<Vec<f64>>>()
    } else {
        None
    };
    Ok(FreeFlowEquilibrium { flow, rho, overloaded })
}

/// `J[j][e] = ∂g_j/∂ρ_e` of the free-flow vector field at `rho`.
pub fn free_flow_jacobian(net: &Network, r: &TurningMatrix, rho: &[f64]) -> DMatrix<f64> {
    let n = net.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for e in 0..n {
        let slope = net.cell(e).demand_slope(rho[e]);
        j[(e, e)] -= slope;
        for &(k, rek) in r.row(e) {
            j[(k, e)] += rek * slope;
        }
    }
    j
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianStability {
    pub metzler: bool,
    /// Column sums nonpositive, strictly negative at off-ramps.
    pub column_sums: bool,
    pub spectral_abscissa: f64,
    pub stable: bool,
}

/// Local stability of a free-flow equilibrium from its linearization.
pub fn jacobian_free_flow_stable(net: &Network, r: &TurningMatrix, rho: &[f64]) -> JacobianStability {
    let j = free_flow_jacobian(net, r, rho);
    let n = net.len();
    let metzler = (0..n).all(|a| (0..n).all(|b| a == b || j[(a, b)] >= 0.0));
    let column_sums = (0..n).all(|e| {
        let s: f64 = j.column(e).sum();
        let scale = 1e-12 * (1.0 + j[(e, e)].abs());
        if net.is_off_ramp(e) {
            s < -scale
        } else {
            s <= scale
        }
    });
    let spectral_abscissa = if n == 0 {
        f64::NEG_INFINITY
    } else {
        j.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    };
    JacobianStability { metzler, column_sums, spectral_abscissa, stable: spectral_abscissa < 0.0 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEdge {
    pub from: CellId,
    pub to: CellId,
    /// `∂f^in_to/∂ρ_from > 0`.
    pub via_inflow: bool,
    /// `∂f^out_to/∂ρ_from < 0`.
    pub via_outflow: bool,
    /// One-sided differences disagree; the edge may not exist.
    pub indeterminate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualGraph {
    pub cells: usize,
    pub edges: Vec<DualEdge>,
}

impl DualGraph {
    pub fn has_edge(&self, from: CellId, to: CellId) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to && !e.indeterminate)
    }

    pub fn has_indeterminate(&self) -> bool {
        self.edges.iter().any(|e| e.indeterminate)
    }

    /// Sorted `(from, to)` pairs of determinate edges.
    pub fn edge_set(&self) -> Vec<(CellId, CellId)> {
        let mut v: Vec<_> = self.edges.iter().filter(|e| !e.indeterminate).map(|e| (e.from, e.to)).collect();
        v.sort_unstable();
        v
    }

    /// Plain DOT, one `i -> j` line per edge.
    pub fn write_dot<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "digraph dual {{")?;
        for e in &self.edges {
            if e.indeterminate {
                writeln!(w, "  {} -> {} [style=dashed];", e.from, e.to)?;
            } else {
                writeln!(w, "  {} -> {};", e.from, e.to)?;
            }
        }
        writeln!(w, "}}")
    }
}

/// Derivative sign threshold for dual-graph edges.
pub const EDGE_THRESHOLD: f64 = 1e-7;

/// Builds the dual graph at `rho` by central differences. `step_scale`
/// multiplies the default step `1e-4·max(1, ρ)`.
#[allow(clippy::too_many_arguments)]
pub fn dual_graph(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    lambda: &[f64],
    step_scale: f64,
) -> Result<DualGraph, AnalysisError> {
    let n = net.len();
    let base = compute_flows(net, policy, r, controls, rho, lambda)?;
    let mut edges = Vec::new();
    let mut x = rho.to_vec();
    for i in 0..n {
        let h = step_scale * fd_step(rho[i]);
        let jam = net.cell(i).jam.finite().unwrap_or(f64::INFINITY);
        let can_down = rho[i] - h >= 0.0;
        let can_up = rho[i] + h <= jam;
        let up = if can_up {
            x[i] = rho[i] + h;
            Some(compute_flows(net, policy, r, controls, &x, lambda)?)
        } else {
            None
        };
        let down = if can_down {
            x[i] = rho[i] - h;
            Some(compute_flows(net, policy, r, controls, &x, lambda)?)
        } else {
            None
        };
        x[i] = rho[i];
        for j in (0..n).filter(|&j| j != i) {
            let sides = |pick: &dyn Fn(&FlowMatrix) -> f64| {
                let fwd = up.as_ref().map(|u| (pick(u) - pick(&base)) / h);
                let bwd = down.as_ref().map(|d| (pick(&base) - pick(d)) / h);
                (fwd, bwd)
            };
            let (fi, bi) = sides(&|f: &FlowMatrix| f.inflow[j]);
            let (fo, bo) = sides(&|f: &FlowMatrix| -f.outflow[j]);
            // positive means "edge" for both tests after the sign flip above
            let test = |fwd: Option<f64>, bwd: Option<f64>| -> (bool, bool) {
                match (fwd, bwd) {
                    (Some(a), Some(b)) => {
                        let avg = 0.5 * (a + b);
                        ((avg > EDGE_THRESHOLD), (a > EDGE_THRESHOLD) != (b > EDGE_THRESHOLD))
                    }
                    (Some(a), None) | (None, Some(a)) => (a > EDGE_THRESHOLD, false),
                    (None, None) => (false, false),
                }
            };
            let (via_inflow, ind_in) = test(fi, bi);
            let (via_outflow, ind_out) = test(fo, bo);
            if via_inflow || via_outflow || ind_in || ind_out {
                edges.push(DualEdge {
                    from: i,
                    to: j,
                    via_inflow,
                    via_outflow,
                    indeterminate: (ind_in && !via_outflow) || (ind_out && !via_inflow),
                });
            }
        }
    }
    Ok(DualGraph { cells: n, edges })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rootedness {
    Rooted,
    /// Cells without a path to an off-ramp.
    NotRooted(Vec<CellId>),
    /// The answer depends on indeterminate edges.
    Inconclusive,
}

impl Rootedness {
    pub fn is_rooted(&self) -> bool {
        matches!(self, Rootedness::Rooted)
    }
}

fn reach_off_ramps(g: &DualGraph, off_ramps: &[CellId], use_indeterminate: bool) -> Vec<Option<usize>> {
    let mut into: Vec<Vec<CellId>> = vec![Vec::new(); g.cells];
    for e in &g.edges {
        if use_indeterminate || !e.indeterminate {
            into[e.to].push(e.from);
        }
    }
    let mut layer = vec![None; g.cells];
    let mut queue = VecDeque::new();
    for &o in off_ramps {
        layer[o] = Some(0);
        queue.push_back(o);
    }
    while let Some(j) = queue.pop_front() {
        let next = layer[j].map(|l| l + 1);
        for &i in &into[j] {
            if layer[i].is_none() {
                layer[i] = next;
                queue.push_back(i);
            }
        }
    }
    layer
}

/// Whether every cell has a dual-graph path to an off-ramp (reverse BFS).
pub fn is_rooted(g: &DualGraph, off_ramps: &[CellId]) -> Rootedness {
    let strict = reach_off_ramps(g, off_ramps, false);
    if strict.iter().all(Option::is_some) {
        return Rootedness::Rooted;
    }
    let loose = reach_off_ramps(g, off_ramps, true);
    let missing: Vec<CellId> = (0..g.cells).filter(|&i| loose[i].is_none()).collect();
    if missing.is_empty() {
        Rootedness::Inconclusive
    } else {
        Rootedness::NotRooted(missing)
    }
}

/// Cells grouped by dual-graph distance to the off-ramps; the first layer is
/// the off-ramps themselves. Unreached cells are left out.
pub fn bfs_layers(g: &DualGraph, off_ramps: &[CellId]) -> Vec<Vec<CellId>> {
    let layer = reach_off_ramps(g, off_ramps, false);
    let depth = layer.iter().flatten().copied().max().map_or(0, |d| d + 1);
    let mut out = vec![Vec::new(); depth];
    for (i, l) in layer.iter().enumerate() {
        if let Some(l) = l {
            out[*l].push(i);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    FreeFlow,
    /// Inflow limited by the cell's own supply.
    Congested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalStability {
    Stable,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumReport {
    pub rho: Vec<f64>,
    /// Outflow of each cell at `rho`.
    pub flow: Vec<f64>,
    pub regime: Vec<Regime>,
    /// Every outgoing flow of the cell equals its turning demand.
    pub demand_served: Vec<bool>,
    pub local_stability: LocalStability,
    pub rooted: Rootedness,
    /// Monotone policy with a rooted dual graph at `rho`.
    pub globally_stable: bool,
    /// Simulated time to convergence, minutes.
    pub time: f64,
    pub residual: f64,
}

impl EquilibriumReport {
    pub fn congested(&self) -> Vec<CellId> {
        (0..self.rho.len()).filter(|&i| self.regime[i] == Regime::Congested).collect()
    }

    pub fn total_volume(&self) -> f64 {
        self.rho.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EquilibriumOutcome {
    Bounded(Box<EquilibriumReport>),
    /// Total volume kept growing above the divergence bound.
    Divergent { time: f64, total_volume: f64 },
    /// Neither converged nor diverged within the time limit.
    Undecided { time: f64, residual: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    /// Minutes.
    pub dt: f64,
    /// Stop when `‖g(ρ)‖∞·dt` falls below this.
    pub tol: f64,
    /// Minutes.
    pub max_time: f64,
    /// Growth window for the divergence test, minutes.
    pub window: f64,
}

impl Default for SearchOptions {
    fn default() -> SearchOptions {
        SearchOptions { dt: 10.0 / 60.0, tol: 1e-9, max_time: 48.0 * 60.0, window: 30.0 }
    }
}

/// Relative slack used to call a cell supply-limited.
const REGIME_TOL: f64 = 1e-6;

/// Per-cell regime and served-demand flags at `rho`.
pub fn classify(
    net: &Network,
    r: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    flows: &FlowMatrix,
) -> (Vec<Regime>, Vec<bool>) {
    let rr = controls.turning(r);
    let demand = controls.demand(net, rho);
    let supply = controls.supply(net, rho);
    let n = net.len();
    let mut regime = vec![Regime::FreeFlow; n];
    for j in 0..n {
        let want: f64 = net.predecessors(j).iter().map(|&i| rr.get(i, j) * demand[i]).sum();
        if let Bound::Finite(s) = supply[j] {
            if want > s + REGIME_TOL * s.max(1.0) {
                regime[j] = Regime::Congested;
            }
        }
    }
    let served = (0..n)
        .map(|i| {
            rr.row(i).iter().enumerate().all(|(pos, &(_, rij))| {
                let d = rij * demand[i];
                d - flows.rows[i][pos] <= REGIME_TOL * d.max(1.0)
            })
        })
        .collect();
    (regime, served)
}

/// Simulates from the empty network until the vector field vanishes or the
/// total volume diverges, then characterizes the state reached.
pub fn find_equilibrium_by_simulation(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    inflows: &Inflows,
    opts: &SearchOptions,
) -> Result<EquilibriumOutcome, AnalysisError> {
    let cfl = cfl_number(net, opts.dt);
    if cfl > 1.0 + 1e-12 {
        return Err(SimError::Cfl(cfl).into());
    }
    policy.validate(net)?;
    let n = net.len();
    let controls = Controls::identity(n);
    let lambda = inflows.at(0.0);
    let bound = 2.0 * net.bounded_jam_total();
    let window_steps = (opts.window / opts.dt).round().max(1.0) as usize;
    let mut totals: VecDeque<f64> = VecDeque::with_capacity(window_steps + 1);
    let mut rho = vec![0.0; n];
    let steps = (opts.max_time / opts.dt).ceil() as usize;
    let mut residual = f64::INFINITY;
    for k in 0..steps {
        let t = k as f64 * opts.dt;
        let s = step(net, policy, r, &controls, &rho, &lambda, opts.dt, t)?;
        residual = s.flows.net_rate().iter().fold(0.0f64, |m, g| m.max(g.abs())) * opts.dt;
        if residual < opts.tol {
            let report = characterize(net, policy, r, &rho, &lambda, t, residual)?;
            return Ok(EquilibriumOutcome::Bounded(Box::new(report)));
        }
        rho = s.next;
        let total: f64 = rho.iter().sum();
        totals.push_back(total);
        if totals.len() > window_steps + 1 {
            totals.pop_front();
        }
        let growing = totals.len() == window_steps + 1
            && totals.iter().zip(totals.iter().skip(1)).all(|(a, b)| b > a);
        if total > bound && growing {
            return Ok(EquilibriumOutcome::Divergent { time: t + opts.dt, total_volume: total });
        }
    }
    Ok(EquilibriumOutcome::Undecided { time: steps as f64 * opts.dt, residual })
}

/// Regime, stability and rootedness at a (near-)stationary state.
pub fn characterize(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    rho: &[f64],
    lambda: &[f64],
    time: f64,
    residual: f64,
) -> Result<EquilibriumReport, AnalysisError> {
    let controls = Controls::identity(net.len());
    let flows = compute_flows(net, policy, r, &controls, rho, lambda)?;
    let (regime, demand_served) = classify(net, r, &controls, rho, &flows);
    let g = dual_graph(net, policy, r, &controls, rho, lambda, 1.0)?;
    let off: Vec<CellId> = net.off_ramps().collect();
    let rooted = is_rooted(&g, &off);
    let globally_stable = policy.is_monotone() && rooted.is_rooted();
    let all_free = regime.iter().all(|&x| x == Regime::FreeFlow) && demand_served.iter().all(|&b| b);
    let local_stability = if globally_stable || (all_free && jacobian_free_flow_stable(net, r, rho).stable) {
        LocalStability::Stable
    } else {
        LocalStability::Inconclusive
    };
    Ok(EquilibriumReport {
        rho: rho.to_vec(),
        flow: flows.outflow,
        regime,
        demand_served,
        local_stability,
        rooted,
        globally_stable,
        time,
        residual,
    })
}
