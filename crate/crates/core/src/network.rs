//! Cells, junction topology, turning preferences and inflow profiles.
//!
//! State is a vehicle volume per cell. Lengths are miles and speeds mph at the
//! boundary; every flow returned from here is in veh/min and every time is in
//! minutes.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

pub type CellId = usize;
pub type NodeId = usize;

/// The node standing for the outside world: tail of every on-ramp, head of
/// every off-ramp.
pub const EXTERNAL: NodeId = 0;

const MIN_PER_HOUR: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("cell {0} does not exist")]
    UnknownCell(CellId),
    #[error("{0} cells but {1} endpoint pairs")]
    Dimension(usize, usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("cell {cell}: {reason}")]
    Incident { cell: CellId, reason: String },
}

/// A nonnegative quantity that may be unbounded (jam volume of an on-ramp,
/// uncapped supply, no metering).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    Finite(f64),
    Unbounded,
}

impl Bound {
    pub fn min(self, other: Bound) -> Bound {
        match (self, other) {
            (Bound::Finite(a), Bound::Finite(b)) => Bound::Finite(a.min(b)),
            (Bound::Finite(a), Bound::Unbounded) | (Bound::Unbounded, Bound::Finite(a)) => {
                Bound::Finite(a)
            }
            (Bound::Unbounded, Bound::Unbounded) => Bound::Unbounded,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Bound::Finite(x) => Some(x),
            Bound::Unbounded => None,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, Bound::Unbounded)
    }

    /// True when `x` does not exceed the bound.
    pub fn admits(self, x: f64) -> bool {
        match self {
            Bound::Finite(b) => x <= b,
            Bound::Unbounded => true,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(x) => write!(f, "{x}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    OnRamp,
    OffRamp,
    Internal,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::OnRamp => "onramp",
            CellKind::OffRamp => "offramp",
            CellKind::Internal => "internal",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "onramp" => Some(CellKind::OnRamp),
            "offramp" => Some(CellKind::OffRamp),
            "internal" => Some(CellKind::Internal),
            _ => None,
        }
    }
}

/// Affine piece `a + b·ρ`, in veh/min with ρ in vehicles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub a: f64,
    pub b: f64,
}

impl Piece {
    fn eval(self, rho: f64) -> f64 {
        self.a + self.b * rho
    }
}

/// Shape of the uncontrolled demand and supply curves.
///
/// `Affine` is the linear demand / affine supply pair built from `v`, `w` and
/// the jam volume. `Concave` takes both curves as minima of affine pieces and
/// ignores `v`, `w` for flow evaluation (they still drive the CFL number).
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Affine,
    Concave { demand: Vec<Piece>, supply: Vec<Piece> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Miles.
    pub length: f64,
    pub kind: CellKind,
    /// Free-flow speed, mph.
    pub v: f64,
    /// Congestion wave speed, mph.
    pub w: f64,
    /// Jam volume in vehicles.
    pub jam: Bound,
    /// Supply saturation, veh/min.
    pub saturation: Bound,
    pub shape: Shape,
}

impl Cell {
    /// A cell with affine curves; `jam_density` in veh/mi, `None` for the
    /// unbounded on-ramp convention.
    pub fn new(kind: CellKind, length: f64, v: f64, w: f64, jam_density: Option<f64>) -> Cell {
        Cell {
            length,
            kind,
            v,
            w,
            jam: match jam_density {
                Some(k) => Bound::Finite(k * length),
                None => Bound::Unbounded,
            },
            saturation: Bound::Unbounded,
            shape: Shape::Affine,
        }
    }

    pub fn on_ramp(length: f64, v: f64, w: f64) -> Cell {
        Cell::new(CellKind::OnRamp, length, v, w, None)
    }

    pub fn internal(length: f64, v: f64, w: f64, jam_density: f64) -> Cell {
        Cell::new(CellKind::Internal, length, v, w, Some(jam_density))
    }

    pub fn off_ramp(length: f64, v: f64, w: f64, jam_density: f64) -> Cell {
        Cell::new(CellKind::OffRamp, length, v, w, Some(jam_density))
    }

    pub fn with_saturation(mut self, s: f64) -> Cell {
        self.saturation = Bound::Finite(s);
        self
    }

    /// d(ρ)/ρ for the affine shape, 1/min.
    pub fn demand_coeff(&self) -> f64 {
        self.v / (MIN_PER_HOUR * self.length)
    }

    /// Slope magnitude of the affine supply, 1/min.
    pub fn supply_coeff(&self) -> f64 {
        self.w / (MIN_PER_HOUR * self.length)
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.shape, Shape::Affine)
    }

    /// Controlled demand `α·d(ρ)`, veh/min.
    pub fn demand(&self, rho: f64, alpha: f64) -> f64 {
        alpha * self.uncontrolled_demand(rho)
    }

    /// Demand with explicit range checks on ρ and α.
    pub fn checked_demand(&self, rho: f64, alpha: f64) -> Result<f64, NetworkError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(NetworkError::Precondition(format!("alpha {alpha} outside [0, 1]")));
        }
        if rho < 0.0 || !self.jam.admits(rho) {
            return Err(NetworkError::Precondition(format!(
                "volume {rho} outside [0, {}]",
                self.jam
            )));
        }
        Ok(self.demand(rho, alpha))
    }

    pub fn uncontrolled_demand(&self, rho: f64) -> f64 {
        match &self.shape {
            Shape::Affine => self.demand_coeff() * rho,
            Shape::Concave { demand, .. } => min_pieces(demand, rho).max(0.0),
        }
    }

    /// Derivative of the uncontrolled demand at ρ (right derivative at kinks).
    pub fn demand_slope(&self, rho: f64) -> f64 {
        match &self.shape {
            Shape::Affine => self.demand_coeff(),
            Shape::Concave { demand, .. } => active_piece(demand, rho).map_or(0.0, |p| p.b),
        }
    }

    /// `min{S, s^u(ρ), β}`.
    pub fn supply(&self, rho: f64, beta: Bound) -> Bound {
        self.uncontrolled_supply(rho).min(beta)
    }

    pub fn uncontrolled_supply(&self, rho: f64) -> Bound {
        let Bound::Finite(jam) = self.jam else {
            return Bound::Unbounded.min(self.saturation);
        };
        let s = match &self.shape {
            Shape::Affine => self.supply_coeff() * (jam - rho),
            Shape::Concave { supply, .. } => min_pieces(supply, rho),
        };
        Bound::Finite(s.max(0.0)).min(self.saturation)
    }

    /// Smallest ρ whose demand equals `flow`, if it lies in the state range.
    pub fn demand_inverse(&self, flow: f64) -> Option<f64> {
        if flow < 0.0 {
            return None;
        }
        let rho = match &self.shape {
            Shape::Affine => flow / self.demand_coeff(),
            Shape::Concave { .. } => {
                let hi = self.jam.finite().unwrap_or(1e12);
                if self.uncontrolled_demand(hi) < flow {
                    return None;
                }
                let (mut lo, mut hi) = (0.0, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.uncontrolled_demand(mid) < flow {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        };
        self.jam.admits(rho).then_some(rho)
    }

    /// Flow capacity `max_ρ min{d(ρ), s(ρ)}`.
    pub fn capacity(&self) -> Bound {
        let Bound::Finite(jam) = self.jam else {
            return self.saturation;
        };
        match &self.shape {
            Shape::Affine => {
                let (v, w) = (self.demand_coeff(), self.supply_coeff());
                Bound::Finite(v * w * jam / (v + w)).min(self.saturation)
            }
            Shape::Concave { .. } => {
                // min of concave functions is concave: ternary search
                let q = |r: f64| {
                    let s = self.uncontrolled_supply(r).finite().unwrap_or(f64::MAX);
                    self.uncontrolled_demand(r).min(s)
                };
                let (mut lo, mut hi) = (0.0, jam);
                for _ in 0..200 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if q(m1) < q(m2) {
                        lo = m1;
                    } else {
                        hi = m2;
                    }
                }
                Bound::Finite(q(0.5 * (lo + hi)))
            }
        }
    }
}

fn min_pieces(pieces: &[Piece], rho: f64) -> f64 {
    pieces.iter().map(|p| p.eval(rho)).fold(f64::INFINITY, f64::min)
}

fn active_piece(pieces: &[Piece], rho: f64) -> Option<Piece> {
    let mut best: Option<Piece> = None;
    for &p in pieces {
        best = match best {
            Some(b) if b.eval(rho) < p.eval(rho) || (b.eval(rho) == p.eval(rho) && b.b <= p.b) => {
                Some(b)
            }
            _ => Some(p),
        };
    }
    best
}

/// Directed multigraph of cells. Cell `i` runs from node `tail(i)` to node
/// `head(i)`; node [`EXTERNAL`] is the outside world.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cells: Vec<Cell>,
    tail: Vec<NodeId>,
    head: Vec<NodeId>,
    node_out: Vec<Vec<CellId>>,
    node_in: Vec<Vec<CellId>>,
}

impl Network {
    pub fn new(cells: Vec<Cell>, ends: Vec<(NodeId, NodeId)>) -> Result<Network, NetworkError> {
        if cells.len() != ends.len() {
            return Err(NetworkError::Dimension(cells.len(), ends.len()));
        }
        let nodes = ends.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0) + 1;
        let mut node_out = vec![Vec::new(); nodes];
        let mut node_in = vec![Vec::new(); nodes];
        for (i, &(t, h)) in ends.iter().enumerate() {
            node_out[t].push(i);
            node_in[h].push(i);
        }
        Ok(Network {
            cells,
            tail: ends.iter().map(|e| e.0).collect(),
            head: ends.iter().map(|e| e.1).collect(),
            node_out,
            node_in,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_out.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, i: CellId) -> &Cell {
        &self.cells[i]
    }

    pub fn tail(&self, i: CellId) -> NodeId {
        self.tail[i]
    }

    pub fn head(&self, i: CellId) -> NodeId {
        self.head[i]
    }

    /// Cells leaving node `v` (E_v^+). Empty for the external node.
    pub fn node_out(&self, v: NodeId) -> &[CellId] {
        if v == EXTERNAL {
            &[]
        } else {
            &self.node_out[v]
        }
    }

    /// Cells entering node `v` (E_v^-). Empty for the external node.
    pub fn node_in(&self, v: NodeId) -> &[CellId] {
        if v == EXTERNAL {
            &[]
        } else {
            &self.node_in[v]
        }
    }

    /// Internal junction nodes, i.e. every node except [`EXTERNAL`].
    pub fn junctions(&self) -> impl Iterator<Item = NodeId> {
        1..self.node_count()
    }

    /// E_i^+: cells downstream of cell `i`.
    pub fn successors(&self, i: CellId) -> &[CellId] {
        self.node_out(self.head[i])
    }

    /// E_j^-: cells upstream of cell `j`.
    pub fn predecessors(&self, j: CellId) -> &[CellId] {
        self.node_in(self.tail[j])
    }

    pub fn is_on_ramp(&self, i: CellId) -> bool {
        self.tail[i] == EXTERNAL
    }

    pub fn is_off_ramp(&self, i: CellId) -> bool {
        self.head[i] == EXTERNAL
    }

    pub fn on_ramps(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.len()).filter(|&i| self.is_on_ramp(i))
    }

    pub fn off_ramps(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.len()).filter(|&i| self.is_off_ramp(i))
    }

    /// Position of `j` in `successors(i)`.
    pub fn successor_index(&self, i: CellId, j: CellId) -> Option<usize> {
        self.successors(i).iter().position(|&k| k == j)
    }

    /// Every internal node is a merge (one outgoing cell) or a diverge (one
    /// incoming cell).
    pub fn is_merge_diverge(&self) -> bool {
        self.junctions()
            .all(|v| self.node_out(v).len() <= 1 || self.node_in(v).len() <= 1)
    }

    /// Junction whose outgoing set is a single cell.
    pub fn is_merge_node(&self, v: NodeId) -> bool {
        v != EXTERNAL && self.node_out(v).len() == 1
    }

    pub fn is_diverge_node(&self, v: NodeId) -> bool {
        v != EXTERNAL && self.node_in(v).len() == 1 && self.node_out(v).len() > 1
    }

    /// Copy of the network with one cell replaced.
    pub fn with_cell(&self, i: CellId, cell: Cell) -> Result<Network, NetworkError> {
        if i >= self.len() {
            return Err(NetworkError::UnknownCell(i));
        }
        let mut out = self.clone();
        out.cells[i] = cell;
        Ok(out)
    }

    /// Jam volumes of the bounded cells, summed.
    pub fn bounded_jam_total(&self) -> f64 {
        self.cells.iter().filter_map(|c| c.jam.finite()).sum()
    }

    /// Cells that can reach an off-ramp along downstream links.
    pub fn reaches_off_ramp(&self) -> Vec<bool> {
        let mut ok = vec![false; self.len()];
        let mut queue: VecDeque<CellId> = self.off_ramps().collect();
        for &i in &queue {
            ok[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for &i in self.predecessors(j) {
                if !ok[i] {
                    ok[i] = true;
                    queue.push_back(i);
                }
            }
        }
        ok
    }

    pub fn apply_incident(&self, incident: &Incident) -> Result<Network, NetworkError> {
        let i = incident.cell;
        if i >= self.len() {
            return Err(NetworkError::UnknownCell(i));
        }
        let mut cell = self.cells[i].clone();
        let bad = |reason: String| NetworkError::Incident { cell: i, reason };
        match incident.change {
            IncidentChange::Speed(v) => {
                if v <= 0.0 {
                    return Err(bad(format!("speed {v} must be positive")));
                }
                cell.v = v;
            }
            IncidentChange::Capacity(c) => {
                // solve v·w·B / (60 L (v + w)) = C for v
                let Some(jam) = cell.jam.finite() else {
                    return Err(bad("on-ramp capacity is unbounded".into()));
                };
                if !cell.is_affine() {
                    return Err(bad("capacity change needs the affine shape".into()));
                }
                let ceiling = cell.supply_coeff() * jam;
                if !(c > 0.0 && c < ceiling) {
                    return Err(bad(format!("capacity {c} outside (0, {ceiling})")));
                }
                cell.v = MIN_PER_HOUR * cell.length * c * cell.w
                    / (cell.w * jam - MIN_PER_HOUR * cell.length * c);
            }
        }
        self.with_cell(i, cell)
    }
}

/// Parameter change on one cell at time `time` (minutes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Incident {
    pub time: f64,
    pub cell: CellId,
    pub change: IncidentChange,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IncidentChange {
    /// New free-flow speed, mph.
    Speed(f64),
    /// New flow capacity, veh/min, realized by lowering the free-flow speed.
    Capacity(f64),
}

/// Turning preferences, one row per cell aligned with `Network::successors`.
#[derive(Clone, Debug, PartialEq)]
pub struct TurningMatrix {
    rows: Vec<Vec<(CellId, f64)>>,
}

impl TurningMatrix {
    /// Row `i` gets `f(i, j)` for every successor `j`.
    pub fn from_fn(net: &Network, mut f: impl FnMut(CellId, CellId) -> f64) -> TurningMatrix {
        TurningMatrix {
            rows: (0..net.len())
                .map(|i| net.successors(i).iter().map(|&j| (j, f(i, j))).collect())
                .collect(),
        }
    }

    pub fn uniform(net: &Network) -> TurningMatrix {
        TurningMatrix::from_fn(net, |i, _| 1.0 / net.successors(i).len() as f64)
    }

    /// Builds from explicit `(i, j, R_ij)` triples; missing consecutive pairs
    /// get 0.
    pub fn from_entries(
        net: &Network,
        entries: &[(CellId, CellId, f64)],
    ) -> Result<TurningMatrix, NetworkError> {
        let mut r = TurningMatrix::from_fn(net, |_, _| 0.0);
        for &(i, j, x) in entries {
            r.set(i, j, x)?;
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: CellId) -> &[(CellId, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: CellId, j: CellId) -> f64 {
        self.rows
            .get(i)
            .and_then(|r| r.iter().find(|e| e.0 == j))
            .map_or(0.0, |e| e.1)
    }

    pub fn set(&mut self, i: CellId, j: CellId, x: f64) -> Result<(), NetworkError> {
        let row = self.rows.get_mut(i).ok_or(NetworkError::UnknownCell(i))?;
        let e = row.iter_mut().find(|e| e.0 == j).ok_or_else(|| {
            NetworkError::Precondition(format!("cells {i} and {j} are not consecutive"))
        })?;
        e.1 = x;
        Ok(())
    }

    pub fn set_row(&mut self, i: CellId, values: &[f64]) {
        for (e, &x) in self.rows[i].iter_mut().zip(values) {
            e.1 = x;
        }
    }

    /// Row-sum, sign and alignment checks against `net`.
    pub fn validate(&self, net: &Network) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.rows.len() != net.len() {
            out.push(Violation::new(
                Rule::Turning,
                None,
                None,
                format!("{} rows for {} cells", self.rows.len(), net.len()),
            ));
            return out;
        }
        for i in 0..net.len() {
            let row = &self.rows[i];
            let aligned = row.len() == net.successors(i).len()
                && row.iter().zip(net.successors(i)).all(|(e, &j)| e.0 == j);
            if !aligned {
                out.push(Violation::new(
                    Rule::Turning,
                    Some(i),
                    None,
                    "row does not match downstream cells".into(),
                ));
                continue;
            }
            if let Some(&(j, x)) = row.iter().find(|e| !(e.1 >= 0.0 && e.1 <= 1.0)) {
                out.push(Violation::new(
                    Rule::Turning,
                    Some(i),
                    None,
                    format!("R[{i}][{j}] = {x} outside [0, 1]"),
                ));
            }
            if !net.is_off_ramp(i) {
                let sum: f64 = row.iter().map(|e| e.1).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    out.push(Violation::new(
                        Rule::Turning,
                        Some(i),
                        None,
                        format!("row sums to {sum}"),
                    ));
                }
            }
        }
        out
    }
}

/// Exogenous inflow λ_i(t) of one on-ramp, veh/min.
#[derive(Clone, Debug, PartialEq)]
pub enum InflowProfile {
    Constant(f64),
    /// `(start, λ)` breakpoints sorted by start; the first value also holds
    /// before its start.
    Piecewise(Vec<(f64, f64)>),
    /// `base` evaluated at `t mod period`.
    Periodic { period: f64, base: Box<InflowProfile> },
}

impl InflowProfile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            InflowProfile::Constant(x) => *x,
            InflowProfile::Piecewise(steps) => {
                let k = steps.partition_point(|s| s.0 <= t);
                steps.get(k.saturating_sub(1)).map_or(0.0, |s| s.1)
            }
            InflowProfile::Periodic { period, base } => base.at(t.rem_euclid(*period)),
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            InflowProfile::Constant(x) => *x >= 0.0 && x.is_finite(),
            InflowProfile::Piecewise(steps) => {
                !steps.is_empty()
                    && steps.iter().all(|s| s.1 >= 0.0 && s.1.is_finite())
                    && steps.windows(2).all(|w| w[0].0 < w[1].0)
            }
            InflowProfile::Periodic { period, base } => *period > 0.0 && base.is_valid(),
        }
    }
}

/// Inflow profiles for every cell; only on-ramps may carry one.
#[derive(Clone, Debug, PartialEq)]
pub struct Inflows {
    profiles: Vec<Option<InflowProfile>>,
}

impl Inflows {
    pub fn none(net: &Network) -> Inflows {
        Inflows { profiles: vec![None; net.len()] }
    }

    /// Constant λ_i = `f(i)` on every on-ramp.
    pub fn constant(net: &Network, mut f: impl FnMut(CellId) -> f64) -> Inflows {
        let mut out = Inflows::none(net);
        for i in net.on_ramps() {
            out.profiles[i] = Some(InflowProfile::Constant(f(i)));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn set(&mut self, i: CellId, profile: InflowProfile) {
        self.profiles[i] = Some(profile);
    }

    pub fn get(&self, i: CellId) -> Option<&InflowProfile> {
        self.profiles.get(i).and_then(|p| p.as_ref())
    }

    /// λ(t) extended by zeros off the on-ramps.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.profiles.len()];
        self.at_into(t, &mut out);
        out
    }

    pub fn at_into(&self, t: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.profiles) {
            *o = p.as_ref().map_or(0.0, |p| p.at(t));
        }
    }

    pub fn validate(&self, net: &Network) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, p) in self.profiles.iter().enumerate() {
            let Some(p) = p else { continue };
            if i >= net.len() || !net.is_on_ramp(i) {
                out.push(Violation::new(Rule::Inflow, Some(i), None, "inflow on a non-ramp".into()));
            } else if !p.is_valid() {
                out.push(Violation::new(Rule::Inflow, Some(i), None, "malformed profile".into()));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    SelfLoop,
    Unrooted,
    RampKind,
    Parameter,
    Turning,
    Inflow,
    Topology,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::SelfLoop => "self-loop",
            Rule::Unrooted => "unrooted cell",
            Rule::RampKind => "ramp kind",
            Rule::Parameter => "parameter",
            Rule::Turning => "turning matrix",
            Rule::Inflow => "inflow",
            Rule::Topology => "topology",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub rule: Rule,
    pub cell: Option<CellId>,
    pub node: Option<NodeId>,
    pub detail: String,
}

impl Violation {
    pub fn new(rule: Rule, cell: Option<CellId>, node: Option<NodeId>, detail: String) -> Violation {
        Violation { rule, cell, node, detail }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)?;
        if let Some(c) = self.cell {
            write!(f, " at cell {c}")?;
        }
        if let Some(n) = self.node {
            write!(f, " at node {n}")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

/// Structural checks on a network; empty iff every invariant holds.
pub fn validate(net: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, c) in net.cells().iter().enumerate() {
        let v = |rule, detail: &str| Violation::new(rule, Some(i), None, detail.to_string());
        if !(c.length > 0.0 && c.v > 0.0 && c.w > 0.0) {
            out.push(v(Rule::Parameter, "length, v and w must be positive"));
        }
        match (c.kind, c.jam) {
            (CellKind::OnRamp, Bound::Unbounded) => {}
            (CellKind::OnRamp, Bound::Finite(_)) => {
                out.push(v(Rule::RampKind, "on-ramp with finite jam volume"))
            }
            (_, Bound::Unbounded) => out.push(v(Rule::RampKind, "unbounded jam volume off an on-ramp")),
            (_, Bound::Finite(b)) if !(b > 0.0) => out.push(v(Rule::Parameter, "jam volume must be positive")),
            _ => {}
        }
        if net.tail(i) == net.head(i) {
            out.push(v(Rule::SelfLoop, "tail equals head"));
        }
        if (c.kind == CellKind::OnRamp) != net.is_on_ramp(i) {
            out.push(v(Rule::RampKind, "on-ramps are exactly the cells leaving the external node"));
        }
        if (c.kind == CellKind::OffRamp) != net.is_off_ramp(i) {
            out.push(v(Rule::RampKind, "off-ramps are exactly the cells entering the external node"));
        }
    }
    for (i, ok) in net.reaches_off_ramp().into_iter().enumerate() {
        if !ok {
            out.push(Violation::new(Rule::Unrooted, Some(i), None, "no path to an off-ramp".into()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn main_cell() -> Cell {
        Cell::internal(2.0, 65.0, 13.0, 200.0)
    }

    #[test]
    fn demand_matches_table_values() {
        let c = main_cell();
        assert_eq!(c.demand(0.0, 1.0), 0.0);
        assert!((c.demand(10.0, 1.0) - 325.0 / 60.0).abs() < 1e-12);
        assert!((c.demand(10.0, 0.5) - 2.708_333_333_333_333).abs() < 1e-12);
        assert!(c.checked_demand(10.0, 1.5).is_err());
        assert!(c.checked_demand(401.0, 1.0).is_err());
    }

    #[test]
    fn supply_examples() {
        let c = main_cell();
        assert_eq!(c.supply(400.0, Bound::Unbounded), Bound::Finite(0.0));
        let s = c.supply(0.0, Bound::Unbounded).finite().unwrap();
        assert!((s * 60.0 - 2600.0).abs() < 1e-9);
        assert_eq!(c.supply(0.0, Bound::Finite(3.0)), Bound::Finite(3.0));
        assert!(Cell::on_ramp(0.5, 25.0, 13.0).supply(7.0, Bound::Unbounded).is_unbounded());
    }

    #[test]
    fn capacity_closed_form() {
        let sym = Cell::internal(1.0, 30.0, 30.0, 100.0);
        let c = sym.capacity().finite().unwrap();
        assert!((c - 30.0 * 100.0 / 2.0 / 60.0).abs() < 1e-12);
        let main = main_cell().capacity().finite().unwrap();
        assert!((main * 60.0 - 2_166.666_666_666_667).abs() < 1e-9);
        let sat = main_cell().with_saturation(10.0);
        assert_eq!(sat.capacity(), Bound::Finite(10.0));
    }

    #[test]
    fn capacity_of_concave_shape() {
        let mut c = main_cell();
        c.shape = Shape::Concave {
            demand: vec![Piece { a: 0.0, b: 1.0 }, Piece { a: 20.0, b: 0.2 }],
            supply: vec![Piece { a: 100.0, b: -0.25 }],
        };
        // d = min(ρ, 20 + 0.2ρ), s = 100 − 0.25ρ; they meet where 20 + 0.2ρ = 100 − 0.25ρ
        let rho = 80.0 / 0.45;
        let want = 20.0 + 0.2 * rho;
        assert!((c.capacity().finite().unwrap() - want).abs() < 1e-6);
        assert_eq!(c.demand_slope(10.0), 1.0);
        assert_eq!(c.demand_slope(40.0), 0.2);
        assert!((c.demand_inverse(22.0).unwrap() - 22.0).abs() < 1e-9);
    }

    fn line(n: usize) -> Network {
        let mut cells = vec![Cell::on_ramp(0.5, 25.0, 13.0)];
        for _ in 1..n - 1 {
            cells.push(main_cell());
        }
        cells.push(Cell::off_ramp(0.5, 25.0, 13.0, 200.0));
        let ends = (0..n)
            .map(|i| (if i == 0 { EXTERNAL } else { i }, if i + 1 == n { EXTERNAL } else { i + 1 }))
            .collect();
        Network::new(cells, ends).unwrap()
    }

    #[test]
    fn validate_accepts_line_and_flags_problems() {
        let net = line(4);
        assert!(validate(&net).is_empty());
        assert_eq!(net.successors(1), &[2]);
        assert_eq!(net.predecessors(1), &[0]);
        assert!(net.successors(3).is_empty());
        assert!(net.is_merge_diverge());

        let looped = Network::new(vec![main_cell()], vec![(1, 1)]).unwrap();
        let v = validate(&looped);
        assert!(v.iter().any(|x| x.rule == Rule::SelfLoop));
        assert!(v.iter().any(|x| x.rule == Rule::Unrooted && x.cell == Some(0)));
    }

    #[test]
    fn dead_end_is_unrooted() {
        let cells = vec![Cell::on_ramp(0.5, 25.0, 13.0), main_cell(), main_cell(), Cell::off_ramp(0.5, 25.0, 13.0, 200.0)];
        // 0 -> node1 -> {1, 3}; cell 1 runs into node 2 and cell 2 loops back to node 2's ... dead end at node 3
        let net = Network::new(cells, vec![(0, 1), (1, 2), (2, 3), (1, 0)]).unwrap();
        let bad: Vec<_> = validate(&net).into_iter().filter(|v| v.rule == Rule::Unrooted).collect();
        assert_eq!(bad.iter().map(|v| v.cell.unwrap()).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn turning_matrix_rows() {
        let net = line(3);
        let r = TurningMatrix::uniform(&net);
        assert!(r.validate(&net).is_empty());
        assert_eq!(r.get(0, 1), 1.0);
        assert_eq!(r.get(0, 2), 0.0);
        let mut bad = r.clone();
        bad.set(0, 1, 0.5).unwrap();
        assert_eq!(bad.validate(&net).len(), 1);
        assert!(bad.set(0, 2, 0.5).is_err());
    }

    #[test]
    fn inflow_profiles() {
        let p = InflowProfile::Piecewise(vec![(0.0, 1.0), (10.0, 3.0)]);
        assert_eq!(p.at(-1.0), 1.0);
        assert_eq!(p.at(9.9), 1.0);
        assert_eq!(p.at(10.0), 3.0);
        let q = InflowProfile::Periodic { period: 20.0, base: Box::new(p) };
        assert_eq!(q.at(25.0), 1.0);
        assert_eq!(q.at(35.0), 3.0);
    }

    #[test]
    fn capacity_incident_sets_speed() {
        let net = line(3);
        let hit = net
            .apply_incident(&Incident { time: 0.0, cell: 1, change: IncidentChange::Capacity(8.0) })
            .unwrap();
        let c = hit.cell(1);
        assert!((c.capacity().finite().unwrap() - 8.0).abs() < 1e-12);
        assert!((c.v - 2.943_396_226_415_094).abs() < 1e-9);
        let slow = net
            .apply_incident(&Incident { time: 0.0, cell: 1, change: IncidentChange::Speed(4.0) })
            .unwrap();
        assert!((slow.cell(1).capacity().finite().unwrap() - 10.196_078_431_372_55).abs() < 1e-9);
        assert!(net
            .apply_incident(&Incident { time: 0.0, cell: 9, change: IncidentChange::Speed(4.0) })
            .is_err());
    }
}
