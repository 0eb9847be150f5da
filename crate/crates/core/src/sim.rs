//! Explicit Euler integration of the network dynamics, trajectory recording
//! and the distance / periodicity monitors built on top of it.

use std::io::{self, Write};

use thiserror::Error;

use crate::network::{Incident, Inflows, Network, NetworkError, TurningMatrix};
use crate::policy::{compute_flows, Controls, FlowMatrix, Policy, PolicyError};

/// Minutes per second.
pub const MINUTE: f64 = 1.0 / 60.0;

/// Slack allowed before a state counts as having left `[0, B]`.
const STATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("CFL number {0} exceeds 1")]
    Cfl(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cell {cell} left the state space at t = {t}: volume {volume}")]
    OutOfRange { cell: usize, t: f64, volume: f64 },
    #[error("time grids differ")]
    GridMismatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `max_e v_e·dt/L_e` with `dt` in minutes.
pub fn cfl_number(net: &Network, dt: f64) -> f64 {
    net.cells()
        .iter()
        .map(|c| c.v * (dt / 60.0) / c.length)
        .fold(0.0, f64::max)
}

/// Piecewise-constant controls; entry `(t, c)` holds from `t` until the next
/// start. Before the first start identity controls apply.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlSchedule {
    pieces: Vec<(f64, Controls)>,
}

impl ControlSchedule {
    pub fn identity() -> ControlSchedule {
        ControlSchedule::default()
    }

    pub fn constant(c: Controls) -> ControlSchedule {
        ControlSchedule { pieces: vec![(f64::NEG_INFINITY, c)] }
    }

    /// Appends a piece; starts must increase.
    pub fn push(&mut self, start: f64, c: Controls) {
        debug_assert!(self.pieces.last().is_none_or(|p| p.0 < start));
        self.pieces.push((start, c));
    }

    pub fn pieces(&self) -> &[(f64, Controls)] {
        &self.pieces
    }

    pub fn is_identity(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn at(&self, t: f64) -> Option<&Controls> {
        let k = self.pieces.partition_point(|p| p.0 <= t + 1e-9);
        k.checked_sub(1).map(|k| &self.pieces[k].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Start time, minutes.
    pub start: f64,
    /// Minutes.
    pub dt: f64,
    /// Minutes.
    pub horizon: f64,
    /// Record every `record_stride` steps (the final state is always kept).
    pub record_stride: usize,
    pub policy: Policy,
    pub schedule: ControlSchedule,
    /// Parameter changes; those at `t ≤ 0` apply before the first step.
    pub incidents: Vec<Incident>,
    pub record_flows: bool,
}

impl SimConfig {
    pub fn new(policy: Policy, dt: f64, horizon: f64) -> SimConfig {
        SimConfig {
            start: 0.0,
            dt,
            horizon,
            record_stride: 1,
            policy,
            schedule: ControlSchedule::identity(),
            incidents: Vec::new(),
            record_flows: false,
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    /// Flows actually applied, after the outflow guard.
    pub flows: FlowMatrix,
    /// `Σ Δρ − dt·(Σ λ − Σ off-ramp outflow)`.
    pub conservation_residual: f64,
}

/// One Euler step. Each cell's outgoing row is scaled down so that it never
/// sends more than it holds; at CFL below 1 with linear demand this never
/// triggers.
#[allow(clippy::too_many_arguments)]
pub fn step(
    net: &Network,
    policy: &Policy,
    r: &TurningMatrix,
    controls: &Controls,
    rho: &[f64],
    lambda: &[f64],
    dt: f64,
    t: f64,
) -> Result<Step, SimError> {
    let mut flows = compute_flows(net, policy, r, controls, rho, lambda)?;
    let n = net.len();
    let mut rescaled = false;
    for i in 0..n {
        let out = flows.outflow[i];
        if out * dt > rho[i] && out > 0.0 {
            let k = (rho[i] / (dt * out)).max(0.0);
            for f in &mut flows.rows[i] {
                *f *= k;
            }
            flows.outflow[i] *= k;
            rescaled = true;
        }
    }
    if rescaled {
        flows.inflow.iter_mut().enumerate().for_each(|(j, x)| {
            if !net.is_on_ramp(j) {
                *x = 0.0;
            }
        });
        for i in 0..n {
            for (pos, &j) in net.successors(i).iter().enumerate() {
                flows.inflow[j] += flows.rows[i][pos];
            }
        }
    }

    let mut next = Vec::with_capacity(n);
    let mut delta = 0.0;
    for i in 0..n {
        let mut x = rho[i] + dt * (flows.inflow[i] - flows.outflow[i]);
        let over = net.cell(i).jam.finite().is_some_and(|b| x > b + STATE_TOL * b.max(1.0));
        if x < -STATE_TOL || over || !x.is_finite() {
            return Err(SimError::OutOfRange { cell: i, t: t + dt, volume: x });
        }
        if x < 0.0 {
            // roundoff of the guard
            x = 0.0;
        }
        delta += x - rho[i];
        next.push(x);
    }
    let ext_in: f64 = net.on_ramps().map(|i| flows.inflow[i]).sum();
    let ext_out: f64 = net.off_ramps().map(|i| flows.outflow[i]).sum();
    let conservation_residual = delta - dt * (ext_in - ext_out);
    Ok(Step { next, flows, conservation_residual })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Flows applied on the step leaving each recorded state, when requested.
    pub flows: Option<Vec<FlowMatrix>>,
    /// Largest per-step conservation residual in absolute value.
    pub max_conservation_residual: f64,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_volume(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.iter().sum()).collect()
    }

    /// Appends `other`, dropping its first state when it repeats our last
    /// time stamp.
    pub fn extend(&mut self, other: Trajectory) {
        let skip = match (self.times.last(), other.times.first()) {
            (Some(a), Some(b)) if (a - b).abs() < 1e-9 => 1,
            _ => 0,
        };
        self.times.extend(other.times.into_iter().skip(skip));
        self.states.extend(other.states.into_iter().skip(skip));
        if let (Some(mine), Some(theirs)) = (self.flows.as_mut(), other.flows) {
            mine.extend(theirs);
        }
        self.max_conservation_residual =
            self.max_conservation_residual.max(other.max_conservation_residual);
    }

    /// CSV with header `t,cell_0,...`, times in minutes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        write!(w, "t")?;
        for i in 0..n {
            write!(w, ",cell_{i}")?;
        }
        writeln!(w)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for x in s {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Network versions over time after applying incidents in order.
fn incident_timeline(net: &Network, incidents: &[Incident]) -> Result<Vec<(f64, Network)>, SimError> {
    let mut sorted = incidents.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out = vec![(f64::NEG_INFINITY, net.clone())];
    for inc in sorted {
        let next = out.last().expect("nonempty").1.apply_incident(&inc)?;
        if inc.time <= 0.0 {
            out.last_mut().expect("nonempty").1 = next;
        } else {
            out.push((inc.time, next));
        }
    }
    Ok(out)
}

pub fn simulate(
    net: &Network,
    r: &TurningMatrix,
    inflows: &Inflows,
    config: &SimConfig,
    rho0: &[f64],
) -> Result<Trajectory, SimError> {
    if !(config.dt > 0.0 && config.horizon >= 0.0) {
        return Err(SimError::Config("dt must be positive and horizon nonnegative".into()));
    }
    if rho0.len() != net.len() {
        return Err(SimError::Config(format!("{} initial volumes for {} cells", rho0.len(), net.len())));
    }
    let timeline = incident_timeline(net, &config.incidents)?;
    for (_, n) in &timeline {
        let cfl = cfl_number(n, config.dt);
        if cfl > 1.0 + 1e-12 {
            return Err(SimError::Cfl(cfl));
        }
    }
    config.policy.validate(net)?;
    let identity = Controls::identity(net.len());
    let stride = config.record_stride.max(1);
    let steps = config.steps();

    let mut traj = Trajectory {
        times: vec![config.start],
        states: vec![rho0.to_vec()],
        flows: config.record_flows.then(Vec::new),
        max_conservation_residual: 0.0,
    };
    let mut rho = rho0.to_vec();
    let mut lambda = vec![0.0; net.len()];
    let mut phase = 0;
    for k in 0..steps {
        let t = config.start + k as f64 * config.dt;
        while phase + 1 < timeline.len() && timeline[phase + 1].0 <= t + 1e-9 {
            phase += 1;
        }
        let current = &timeline[phase].1;
        let controls = config.schedule.at(t).unwrap_or(&identity);
        inflows.at_into(t, &mut lambda);
        let s = step(current, &config.policy, r, controls, &rho, &lambda, config.dt, t)?;
        traj.max_conservation_residual = traj.max_conservation_residual.max(s.conservation_residual.abs());
        rho = s.next;
        let record = (k + 1) % stride == 0 || k + 1 == steps;
        if let Some(fl) = traj.flows.as_mut() {
            if k % stride == 0 {
                fl.push(s.flows);
            }
        }
        if record {
            traj.times.push(config.start + (k + 1) as f64 * config.dt);
            traj.states.push(rho.clone());
        }
    }
    Ok(traj)
}

/// Pointwise `‖a(t) − b(t)‖₁`.
pub fn l1_distance_series(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>, SimError> {
    let same = a.times.len() == b.times.len()
        && a.times.iter().zip(&b.times).all(|(x, y)| (x - y).abs() < 1e-9);
    if !same {
        return Err(SimError::GridMismatch);
    }
    Ok(a.states.iter().zip(&b.states).map(|(x, y)| l1(x, y)).collect())
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum PeriodicOutcome {
    /// State at the start of a period that the period map fixes.
    Converged { state: Vec<f64>, periods: usize },
    /// Bounded cells are saturated and on-ramp queues keep growing.
    Divergent { periods: usize },
    CapReached,
}

pub const MAX_PERIODS: usize = 10_000;

/// Iterates the period map from the empty network until two consecutive
/// period-start states are within `tol` in ℓ1.
#[allow(clippy::too_many_arguments)]
pub fn detect_periodic(
    net: &Network,
    r: &TurningMatrix,
    inflows: &Inflows,
    policy: &Policy,
    period: f64,
    dt: f64,
    tol: f64,
    max_periods: usize,
) -> Result<PeriodicOutcome, SimError> {
    let steps = (period / dt).round();
    if steps < 1.0 || (steps * dt - period).abs() > 1e-9 * period.max(1.0) {
        return Err(SimError::Config(format!("period {period} is not a multiple of dt {dt}")));
    }
    let mut config = SimConfig::new(policy.clone(), dt, period);
    config.record_stride = usize::MAX;
    let bounded = net.bounded_jam_total();
    let ramp_volume = |x: &[f64]| net.on_ramps().map(|i| x[i]).sum::<f64>();
    let mut rho = vec![0.0; net.len()];
    let mut growing = 0;
    for k in 1..=max_periods.min(MAX_PERIODS) {
        // inflows are periodic, so every period can start at t = 0
        let traj = simulate(net, r, inflows, &config, &rho)?;
        let next = traj.last().to_vec();
        if l1(&next, &rho) < tol {
            return Ok(PeriodicOutcome::Converged { state: next, periods: k });
        }
        let total: f64 = next.iter().sum();
        if total > bounded && ramp_volume(&next) > ramp_volume(&rho) {
            growing += 1;
            if growing >= 10 {
                return Ok(PeriodicOutcome::Divergent { periods: k });
            }
        } else {
            growing = 0;
        }
        rho = next;
    }
    Ok(PeriodicOutcome::CapReached)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Cell, InflowProfile, EXTERNAL};

    fn line3() -> (Network, TurningMatrix) {
        let cells = vec![
            Cell::on_ramp(1.0, 30.0, 15.0),
            Cell::internal(1.0, 30.0, 15.0, 100.0),
            Cell::off_ramp(1.0, 30.0, 15.0, 100.0),
        ];
        let net = Network::new(cells, vec![(EXTERNAL, 1), (1, 2), (2, EXTERNAL)]).unwrap();
        let r = TurningMatrix::uniform(&net);
        (net, r)
    }

    #[test]
    fn cfl_of_short_fast_cell() {
        let cells = vec![Cell::internal(0.2, 65.0, 13.0, 500.0)];
        let net = Network::new(cells, vec![(1, 2)]).unwrap();
        assert!((cfl_number(&net, 10.0 * MINUTE) - 0.902_777_777_777_777_8).abs() < 1e-12);
        let unit = Network::new(vec![Cell::internal(1.0, 60.0, 13.0, 100.0)], vec![(1, 2)]).unwrap();
        assert_eq!(cfl_number(&unit, 1.0), 1.0);
    }

    #[test]
    fn hand_euler_step() {
        let (net, r) = line3();
        let rho = [0.0, 10.0, 0.0];
        let s = step(&net, &Policy::NonFifo, &r, &Controls::identity(3), &rho, &[0.0; 3], 0.5, 0.0).unwrap();
        // d_1 = 0.5·10 = 5 veh/min, no inflow
        assert!((s.next[1] - 7.5).abs() < 1e-12);
        assert!((s.next[2] - 2.5).abs() < 1e-12);
        assert!(s.conservation_residual.abs() < 1e-12);
    }

    #[test]
    fn zero_stays_zero() {
        let (net, r) = line3();
        let cfg = SimConfig::new(Policy::NonFifo, 0.5, 10.0);
        let t = simulate(&net, &r, &Inflows::none(&net), &cfg, &[0.0; 3]).unwrap();
        assert_eq!(t.states.len(), 21);
        assert!(t.states.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let (net, r) = line3();
        let cfg = SimConfig::new(Policy::NonFifo, 3.0, 10.0);
        assert!(matches!(simulate(&net, &r, &Inflows::none(&net), &cfg, &[0.0; 3]), Err(SimError::Cfl(_))));
    }

    #[test]
    fn guard_keeps_volumes_nonnegative_at_cfl_one() {
        let (net, r) = line3();
        let cfg = SimConfig::new(Policy::NonFifo, 2.0, 20.0);
        let inflows = Inflows::constant(&net, |_| 3.0);
        let t = simulate(&net, &r, &inflows, &cfg, &[5.0, 40.0, 1.0]).unwrap();
        assert!(t.states.iter().flatten().all(|&x| x >= 0.0));
        assert!(t.max_conservation_residual < 1e-9);
    }

    #[test]
    fn schedule_lookup() {
        let mut s = ControlSchedule::identity();
        assert!(s.at(0.0).is_none());
        let mut c = Controls::identity(2);
        c.alpha[0] = 0.5;
        s.push(5.0, c.clone());
        assert!(s.at(4.0).is_none());
        assert_eq!(s.at(5.0), Some(&c));
    }

    #[test]
    fn csv_header_and_rows() {
        let t = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            flows: None,
            max_conservation_residual: 0.0,
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,cell_0,cell_1\n0,1,2\n1,3,4\n");
    }

    #[test]
    fn periodic_with_constant_inflow_is_the_equilibrium() {
        let (net, r) = line3();
        let inflows = Inflows::constant(&net, |_| 2.0);
        let out = detect_periodic(&net, &r, &inflows, &Policy::NonFifo, 5.0, 0.5, 1e-9, 1000).unwrap();
        let PeriodicOutcome::Converged { state, .. } = out else { panic!("{out:?}") };
        // d = 0.5·ρ = 2 on every cell
        for x in state {
            assert!((x - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn periodic_detects_overload() {
        let (net, r) = line3();
        let mut inflows = Inflows::none(&net);
        inflows.set(0, InflowProfile::Constant(50.0));
        let out = detect_periodic(&net, &r, &inflows, &Policy::NonFifo, 5.0, 0.5, 1e-9, 1000).unwrap();
        assert!(matches!(out, PeriodicOutcome::Divergent { .. }));
    }
}
