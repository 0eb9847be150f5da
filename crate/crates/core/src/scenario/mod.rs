//! Scenario files: a network with its demand, policy, simulation settings,
//! incidents and control request, in a line-oriented text format.
//!
//! One statement per line, `#` starts a comment, tokens are separated by
//! whitespace and options are `key=value`. Cell ids are 0-based, node `0` is
//! the outside world, times are minutes except `sim dt` (seconds), speeds are
//! mph and volumes vehicles. The grammar is documented in `docs/scenario.md`.
//!
//! ```text
//! scenario <name>
//! cell <id> kind=<onramp|offramp|internal> tail=<node> head=<node>
//!      length=<mi> v=<mph> w=<mph> jam=<veh|inf> [saturation=<veh/min>] [name=<token>]
//! shape <id> demand=<a>:<b>,... supply=<a>:<b>,...
//! turn <i> <j> <fraction>
//! inflow <id> const <veh/min> [period=<min>]
//! inflow <id> piecewise <start>:<veh/min> ... [period=<min>]
//! policy <nonfifo|fifo|line|priority> | policy mixture theta=<x>
//! priority <id> <p>
//! sim dt=<s> horizon=<min> [stride=<k>]
//! init zero | init jam-fraction <f> unbounded=<veh> | init cell <id> <veh>
//! incident time=<min> cell=<id> (speed=<mph> | capacity=<veh/min>)
//! objective volume | objective evacuation | weight <id> <eta>
//! control none | control equilibrium extraction=<turning|junction>
//!         | control mpc horizon=<min> offramp=<inequality|exact>
//!         | control periodic period=<min> offramp=<inequality|exact>
//! ```

pub mod la;

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::control::{Extraction, Objective, OffRampRule};
use crate::network::{
    validate, Bound, Cell, CellKind, Incident, IncidentChange, InflowProfile, Inflows, Network, NetworkError, Piece,
    Rule, Shape, TurningMatrix, Violation,
};
use crate::policy::Policy;
use crate::sim::SimConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}{}: {message}", field.as_ref().map(|f| format!(", field `{f}`")).unwrap_or_default())]
    Parse { line: usize, field: Option<String>, message: String },
    #[error("unknown builtin scenario `{0}`")]
    UnknownBuiltin(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn perr(line: usize, field: Option<&str>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, field: field.map(str::to_string), message: message.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSettings {
    pub dt_seconds: f64,
    /// Minutes.
    pub horizon: f64,
    pub stride: usize,
}

impl SimSettings {
    /// Step in minutes.
    pub fn dt(&self) -> f64 {
        self.dt_seconds / 60.0
    }
}

impl Default for SimSettings {
    fn default() -> SimSettings {
        SimSettings { dt_seconds: 10.0, horizon: 180.0, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Zero,
    /// `fraction · B` on bounded cells and `unbounded` vehicles elsewhere.
    JamFraction { fraction: f64, unbounded: f64 },
    Values(Vec<f64>),
}

impl InitialState {
    pub fn volumes(&self, net: &Network) -> Vec<f64> {
        match self {
            InitialState::Zero => vec![0.0; net.len()],
            InitialState::JamFraction { fraction, unbounded } => net
                .cells()
                .iter()
                .map(|c| c.jam.finite().map_or(*unbounded, |b| fraction * b))
                .collect(),
            InitialState::Values(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum ControlRequest {
    #[default]
    None,
    Equilibrium(Extraction),
    Mpc { horizon: f64, off_ramp: OffRampRule },
    Periodic { period: f64, off_ramp: OffRampRule },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub network: Network,
    /// Free-form cell names, empty when unnamed.
    pub cell_names: Vec<String>,
    pub turning: TurningMatrix,
    pub inflows: Inflows,
    pub policy: Policy,
    pub sim: SimSettings,
    pub initial: InitialState,
    pub incidents: Vec<Incident>,
    pub objective: Objective,
    pub control: ControlRequest,
}

/// Names accepted by [`Scenario::builtin`].
pub const BUILTINS: [&str; 4] = ["la", "la-bottleneck", "la-capacity8", "la-mpc"];

impl Scenario {
    /// A scenario around `network` with uniform turning, no arrivals and
    /// default settings.
    pub fn new(name: &str, network: Network) -> Scenario {
        Scenario {
            name: name.to_string(),
            cell_names: vec![String::new(); network.len()],
            turning: TurningMatrix::uniform(&network),
            inflows: Inflows::none(&network),
            policy: Policy::NonFifo,
            sim: SimSettings::default(),
            initial: InitialState::Zero,
            incidents: Vec::new(),
            objective: Objective::total_volume(&network),
            control: ControlRequest::None,
            network,
        }
    }

    /// The Los Angeles benchmark with its default arrivals and a 3 h run.
    pub fn la_benchmark() -> Scenario {
        let b = la::generate();
        let mut s = Scenario::new("la", b.network);
        s.cell_names = b.names;
        s.turning = b.turning;
        s.inflows = b.inflows;
        s
    }

    /// `la`, plus variants: `la-bottleneck` drops the speed of cell label 27
    /// to 4 mph, `la-capacity8` drops its capacity to 8 veh/min, and
    /// `la-mpc` starts half-jammed (50 vehicles on ramps) under
    /// receding-horizon control with a 5 minute window.
    pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::la_benchmark();
        let cell = la::cell_of_label(la::BOTTLENECK_LABEL);
        match name {
            "la" => {}
            "la-bottleneck" => {
                s.incidents.push(Incident { time: 0.0, cell, change: IncidentChange::Speed(4.0) });
            }
            "la-capacity8" => {
                s.incidents.push(Incident { time: 0.0, cell, change: IncidentChange::Capacity(8.0) });
                s.control = ControlRequest::Equilibrium(Extraction::Turning);
            }
            "la-mpc" => {
                s.initial = InitialState::JamFraction { fraction: 0.5, unbounded: 50.0 };
                s.control = ControlRequest::Mpc { horizon: 5.0, off_ramp: OffRampRule::Inequality };
            }
            _ => return Err(ScenarioError::UnknownBuiltin(name.to_string())),
        }
        s.name = name.to_string();
        Ok(s)
    }

    /// `@name` for a builtin, otherwise a file path.
    pub fn open(spec: &str) -> Result<Scenario, ScenarioError> {
        match spec.strip_prefix('@') {
            Some(name) => Scenario::builtin(name),
            None => Scenario::load(spec),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Scenario::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let path = path.as_ref();
        fs::write(path, self.to_text())
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    /// Network after the incidents that hold from the start.
    pub fn initial_network(&self) -> Result<Network, NetworkError> {
        let mut net = self.network.clone();
        let mut early: Vec<&Incident> = self.incidents.iter().filter(|i| i.time <= 0.0).collect();
        early.sort_by(|a, b| a.time.total_cmp(&b.time));
        for inc in early {
            net = net.apply_incident(inc)?;
        }
        Ok(net)
    }

    /// Simulation configuration with the scenario policy and incidents.
    pub fn sim_config(&self) -> SimConfig {
        let mut c = SimConfig::new(self.policy.clone(), self.sim.dt(), self.sim.horizon);
        c.record_stride = self.sim.stride;
        c.incidents = self.incidents.clone();
        c
    }

    pub fn initial_volumes(&self) -> Vec<f64> {
        self.initial.volumes(&self.network)
    }

    /// Structural problems of the network (before and after every incident),
    /// turning preferences, arrivals, policy and initial state.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = validate(&self.network);
        let mut sorted = self.incidents.clone();
        sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut net = self.network.clone();
        for inc in &sorted {
            match net.apply_incident(inc) {
                Ok(next) => {
                    for v in validate(&next) {
                        if !out.contains(&v) {
                            out.push(v);
                        }
                    }
                    net = next;
                }
                Err(e) => out.push(Violation::new(Rule::Parameter, Some(inc.cell), None, e.to_string())),
            }
        }
        out.extend(self.turning.validate(&self.network));
        out.extend(self.inflows.validate(&self.network));
        if let Err(e) = self.policy.validate(&self.network) {
            out.push(Violation::new(Rule::Parameter, None, None, e.to_string()));
        }
        let rho = self.initial_volumes();
        if rho.len() != self.network.len() {
            out.push(Violation::new(Rule::Parameter, None, None, "initial state has the wrong length".into()));
        } else {
            for (i, &x) in rho.iter().enumerate() {
                if x < 0.0 || !self.network.cell(i).jam.admits(x) {
                    out.push(Violation::new(Rule::Parameter, Some(i), None, format!("initial volume {x} outside [0, B]")));
                }
            }
        }
        if !(self.sim.dt_seconds > 0.0 && self.sim.horizon >= 0.0 && self.sim.stride > 0) {
            out.push(Violation::new(Rule::Parameter, None, None, "simulation settings out of range".into()));
        }
        out
    }

    /// Canonical text form; parsing it gives back an equal scenario.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s).expect("writing to a String");
        s
    }

    fn write_text(&self, s: &mut String) -> fmt::Result {
        let net = &self.network;
        writeln!(s, "scenario {}", self.name)?;
        writeln!(s, "# {} cells", net.len())?;
        for (i, c) in net.cells().iter().enumerate() {
            write!(
                s,
                "cell {i} kind={} tail={} head={} length={} v={} w={} jam={}",
                c.kind.as_str(),
                net.tail(i),
                net.head(i),
                c.length,
                c.v,
                c.w,
                c.jam
            )?;
            if let Bound::Finite(sat) = c.saturation {
                write!(s, " saturation={sat}")?;
            }
            if let Some(name) = self.cell_names.get(i).filter(|n| !n.is_empty()) {
                write!(s, " name={name}")?;
            }
            writeln!(s)?;
        }
        for (i, c) in net.cells().iter().enumerate() {
            if let Shape::Concave { demand, supply } = &c.shape {
                writeln!(s, "shape {i} demand={} supply={}", pieces_text(demand), pieces_text(supply))?;
            }
        }
        for i in 0..net.len() {
            for &(j, r) in self.turning.row(i) {
                writeln!(s, "turn {i} {j} {r}")?;
            }
        }
        for i in 0..net.len() {
            if let Some(p) = self.inflows.get(i) {
                writeln!(s, "inflow {i} {}", profile_text(p))?;
            }
        }
        match &self.policy {
            Policy::Mixture { theta } => writeln!(s, "policy mixture theta={theta}")?,
            Policy::PriorityMerge { priorities } => {
                writeln!(s, "policy priority")?;
                for (i, p) in priorities.iter().enumerate() {
                    writeln!(s, "priority {i} {p}")?;
                }
            }
            p => writeln!(s, "policy {}", p.name())?,
        }
        writeln!(s, "sim dt={} horizon={} stride={}", self.sim.dt_seconds, self.sim.horizon, self.sim.stride)?;
        match &self.initial {
            InitialState::Zero => writeln!(s, "init zero")?,
            InitialState::JamFraction { fraction, unbounded } => {
                writeln!(s, "init jam-fraction {fraction} unbounded={unbounded}")?
            }
            InitialState::Values(v) => {
                for (i, x) in v.iter().enumerate() {
                    writeln!(s, "init cell {i} {x}")?;
                }
            }
        }
        for inc in &self.incidents {
            let change = match inc.change {
                IncidentChange::Speed(v) => format!("speed={v}"),
                IncidentChange::Capacity(c) => format!("capacity={c}"),
            };
            writeln!(s, "incident time={} cell={} {change}", inc.time, inc.cell)?;
        }
        match &self.objective {
            Objective::Evacuation => writeln!(s, "objective evacuation")?,
            Objective::Weighted(w) if w.iter().all(|&x| x == 1.0) && w.len() == net.len() => {
                writeln!(s, "objective volume")?
            }
            Objective::Weighted(w) => {
                for (i, x) in w.iter().enumerate() {
                    writeln!(s, "weight {i} {x}")?;
                }
            }
        }
        match &self.control {
            ControlRequest::None => writeln!(s, "control none")?,
            ControlRequest::Equilibrium(e) => writeln!(s, "control equilibrium extraction={}", extraction_name(*e))?,
            ControlRequest::Mpc { horizon, off_ramp } => {
                writeln!(s, "control mpc horizon={horizon} offramp={}", off_ramp_name(*off_ramp))?
            }
            ControlRequest::Periodic { period, off_ramp } => {
                writeln!(s, "control periodic period={period} offramp={}", off_ramp_name(*off_ramp))?
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Parser::default().run(text)
    }
}

fn pieces_text(p: &[Piece]) -> String {
    p.iter().map(|p| format!("{}:{}", p.a, p.b)).collect::<Vec<_>>().join(",")
}

fn profile_text(p: &InflowProfile) -> String {
    match p {
        InflowProfile::Constant(x) => format!("const {x}"),
        InflowProfile::Piecewise(steps) => {
            let parts: Vec<String> = steps.iter().map(|(t, x)| format!("{t}:{x}")).collect();
            format!("piecewise {}", parts.join(" "))
        }
        InflowProfile::Periodic { period, base } => format!("{} period={period}", profile_text(base)),
    }
}

fn extraction_name(e: Extraction) -> &'static str {
    match e {
        Extraction::Turning => "turning",
        Extraction::Junction => "junction",
    }
}

fn off_ramp_name(r: OffRampRule) -> &'static str {
    match r {
        OffRampRule::Inequality => "inequality",
        OffRampRule::Exact => "exact",
    }
}

pub fn parse_off_ramp_rule(s: &str) -> Option<OffRampRule> {
    match s {
        "inequality" => Some(OffRampRule::Inequality),
        "exact" => Some(OffRampRule::Exact),
        _ => None,
    }
}

/// Tokens of one statement after the keyword, split into positional values
/// and `key=value` options.
struct Args<'a> {
    line: usize,
    positional: Vec<&'a str>,
    options: Vec<(&'a str, &'a str)>,
    used: Vec<bool>,
}

impl<'a> Args<'a> {
    fn new(line: usize, tokens: &[&'a str]) -> Args<'a> {
        let mut positional = Vec::new();
        let mut options = Vec::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) => options.push((k, v)),
                None => positional.push(*t),
            }
        }
        let used = vec![false; options.len()];
        Args { line, positional, options, used }
    }

    fn pos(&self, k: usize, what: &str) -> Result<&'a str, ScenarioError> {
        self.positional.get(k).copied().ok_or_else(|| perr(self.line, Some(what), "missing value"))
    }

    fn opt(&mut self, key: &str) -> Option<&'a str> {
        let k = self.options.iter().position(|o| o.0 == key)?;
        self.used[k] = true;
        Some(self.options[k].1)
    }

    fn req(&mut self, key: &str) -> Result<&'a str, ScenarioError> {
        let line = self.line;
        self.opt(key).ok_or_else(|| perr(line, Some(key), "missing option"))
    }

    fn req_num(&mut self, key: &str) -> Result<f64, ScenarioError> {
        let v = self.req(key)?;
        self.num(key, v)
    }

    fn num(&self, key: &str, v: &str) -> Result<f64, ScenarioError> {
        number(self.line, key, v)
    }

    fn int(&self, key: &str, v: &str) -> Result<usize, ScenarioError> {
        v.parse().map_err(|_| perr(self.line, Some(key), format!("`{v}` is not a nonnegative integer")))
    }

    /// Errors on options nobody asked for and on extra positionals.
    fn finish(&self, positional: usize) -> Result<(), ScenarioError> {
        if let Some(k) = self.used.iter().position(|u| !u) {
            return Err(perr(self.line, Some(self.options[k].0), "unknown option"));
        }
        if self.positional.len() > positional {
            return Err(perr(self.line, Some(self.positional[positional]), "unexpected value"));
        }
        Ok(())
    }
}

fn number(line: usize, field: &str, v: &str) -> Result<f64, ScenarioError> {
    match v {
        "inf" => Ok(f64::INFINITY),
        _ => v
            .parse::<f64>()
            .ok()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| perr(line, Some(field), format!("`{v}` is not a number"))),
    }
}

fn pair(line: usize, field: &str, v: &str) -> Result<(f64, f64), ScenarioError> {
    let (a, b) = v.split_once(':').ok_or_else(|| perr(line, Some(field), format!("`{v}` is not `a:b`")))?;
    Ok((number(line, field, a)?, number(line, field, b)?))
}

#[derive(Default)]
struct Parser {
    name: Option<String>,
    cells: Vec<(Cell, usize, usize, String)>,
    shapes: Vec<(usize, usize, Shape)>,
    turns: Vec<(usize, usize, usize, f64)>,
    inflows: Vec<(usize, usize, InflowProfile)>,
    policy: Option<(usize, Policy)>,
    priorities: Vec<(usize, usize, f64)>,
    sim: Option<SimSettings>,
    init: Option<InitialState>,
    init_cells: Vec<(usize, usize, f64)>,
    incidents: Vec<Incident>,
    objective: Option<Objective>,
    weights: Vec<(usize, usize, f64)>,
    control: Option<ControlRequest>,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<Scenario, ScenarioError> {
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let Some((&key, rest)) = tokens.split_first() else { continue };
            let mut a = Args::new(line, rest);
            match key {
                "scenario" => {
                    self.name = Some(a.pos(0, "name")?.to_string());
                    a.finish(1)?;
                }
                "cell" => self.cell(&mut a)?,
                "shape" => self.shape(&mut a)?,
                "turn" => {
                    let i = a.int("from", a.pos(0, "from")?)?;
                    let j = a.int("to", a.pos(1, "to")?)?;
                    let r = a.num("fraction", a.pos(2, "fraction")?)?;
                    a.finish(3)?;
                    self.turns.push((line, i, j, r));
                }
                "inflow" => self.inflow(&mut a)?,
                "policy" => self.policy(&mut a)?,
                "priority" => {
                    let i = a.int("cell", a.pos(0, "cell")?)?;
                    let p = a.num("priority", a.pos(1, "priority")?)?;
                    a.finish(2)?;
                    self.priorities.push((line, i, p));
                }
                "sim" => {
                    let dt_seconds = a.req_num("dt")?;
                    let horizon = a.req_num("horizon")?;
                    let stride = match a.opt("stride") {
                        Some(v) => a.int("stride", v)?,
                        None => 1,
                    };
                    a.finish(0)?;
                    self.sim = Some(SimSettings { dt_seconds, horizon, stride });
                }
                "init" => self.init(&mut a)?,
                "incident" => {
                    let time = a.req_num("time")?;
                    let c = a.req("cell")?;
                    let cell = a.int("cell", c)?;
                    let change = match (a.opt("speed"), a.opt("capacity")) {
                        (Some(v), None) => IncidentChange::Speed(a.num("speed", v)?),
                        (None, Some(v)) => IncidentChange::Capacity(a.num("capacity", v)?),
                        _ => return Err(perr(line, Some("speed"), "give exactly one of speed= and capacity=")),
                    };
                    a.finish(0)?;
                    self.incidents.push(Incident { time, cell, change });
                }
                "objective" => {
                    let o = match a.pos(0, "objective")? {
                        "volume" => None,
                        "evacuation" => Some(Objective::Evacuation),
                        other => return Err(perr(line, Some("objective"), format!("unknown objective `{other}`"))),
                    };
                    a.finish(1)?;
                    self.objective = o;
                }
                "weight" => {
                    let i = a.int("cell", a.pos(0, "cell")?)?;
                    let w = a.num("weight", a.pos(1, "weight")?)?;
                    a.finish(2)?;
                    self.weights.push((line, i, w));
                }
                "control" => self.control(&mut a)?,
                other => return Err(perr(line, None, format!("unknown statement `{other}`"))),
            }
        }
        self.assemble()
    }

    fn cell(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        let id = a.int("id", a.pos(0, "id")?)?;
        if id != self.cells.len() {
            return Err(perr(line, Some("id"), format!("expected cell {} next", self.cells.len())));
        }
        let kind_s = a.req("kind")?;
        let kind = CellKind::parse(kind_s).ok_or_else(|| perr(line, Some("kind"), format!("unknown kind `{kind_s}`")))?;
        let tail = a.req("tail")?;
        let tail = a.int("tail", tail)?;
        let head = a.req("head")?;
        let head = a.int("head", head)?;
        let length = a.req_num("length")?;
        let v = a.req_num("v")?;
        let w = a.req_num("w")?;
        let jam = a.req_num("jam")?;
        let saturation = match a.opt("saturation") {
            Some(s) => Bound::Finite(a.num("saturation", s)?),
            None => Bound::Unbounded,
        };
        let name = a.opt("name").unwrap_or("").to_string();
        a.finish(1)?;
        let jam = if jam.is_finite() { Bound::Finite(jam) } else { Bound::Unbounded };
        let cell = Cell { length, kind, v, w, jam, saturation, shape: Shape::Affine };
        self.cells.push((cell, tail, head, name));
        Ok(())
    }

    fn shape(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        let id = a.int("id", a.pos(0, "id")?)?;
        let mut pieces = |key: &str| -> Result<Vec<Piece>, ScenarioError> {
            a.req(key)?
                .split(',')
                .map(|p| pair(line, key, p).map(|(a, b)| Piece { a, b }))
                .collect()
        };
        let demand = pieces("demand")?;
        let supply = pieces("supply")?;
        a.finish(1)?;
        self.shapes.push((line, id, Shape::Concave { demand, supply }));
        Ok(())
    }

    fn inflow(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        let id = a.int("cell", a.pos(0, "cell")?)?;
        let (base, used) = match a.pos(1, "profile")? {
            "const" => (InflowProfile::Constant(a.num("rate", a.pos(2, "rate")?)?), 3),
            "piecewise" => {
                let steps: Vec<(f64, f64)> = a.positional[2..]
                    .iter()
                    .map(|p| pair(line, "breakpoint", p))
                    .collect::<Result<_, _>>()?;
                if steps.is_empty() {
                    return Err(perr(line, Some("breakpoint"), "no breakpoints"));
                }
                let n = a.positional.len();
                (InflowProfile::Piecewise(steps), n)
            }
            other => return Err(perr(line, Some("profile"), format!("unknown profile `{other}`"))),
        };
        let profile = match a.opt("period") {
            Some(p) => InflowProfile::Periodic { period: a.num("period", p)?, base: Box::new(base) },
            None => base,
        };
        a.finish(used)?;
        self.inflows.push((line, id, profile));
        Ok(())
    }

    fn policy(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        let p = match a.pos(0, "policy")? {
            "nonfifo" => Policy::NonFifo,
            "fifo" => Policy::Fifo,
            "line" => Policy::LineCtm,
            "priority" => Policy::PriorityMerge { priorities: Vec::new() },
            "mixture" => {
                Policy::Mixture { theta: a.req_num("theta")? }
            }
            other => return Err(perr(line, Some("policy"), format!("unknown policy `{other}`"))),
        };
        a.finish(1)?;
        self.policy = Some((line, p));
        Ok(())
    }

    fn init(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        match a.pos(0, "init")? {
            "zero" => {
                a.finish(1)?;
                self.init = Some(InitialState::Zero);
            }
            "jam-fraction" => {
                let fraction = a.num("fraction", a.pos(1, "fraction")?)?;
                let unbounded = a.req_num("unbounded")?;
                a.finish(2)?;
                self.init = Some(InitialState::JamFraction { fraction, unbounded });
            }
            "cell" => {
                let i = a.int("cell", a.pos(1, "cell")?)?;
                let x = a.num("volume", a.pos(2, "volume")?)?;
                a.finish(3)?;
                self.init_cells.push((line, i, x));
            }
            other => return Err(perr(line, Some("init"), format!("unknown initial state `{other}`"))),
        }
        Ok(())
    }

    fn control(&mut self, a: &mut Args) -> Result<(), ScenarioError> {
        let line = a.line;
        let off_ramp = |a: &mut Args| -> Result<OffRampRule, ScenarioError> {
            match a.opt("offramp") {
                None => Ok(OffRampRule::default()),
                Some(v) => parse_off_ramp_rule(v).ok_or_else(|| perr(line, Some("offramp"), format!("unknown rule `{v}`"))),
            }
        };
        let c = match a.pos(0, "control")? {
            "none" => ControlRequest::None,
            "equilibrium" => match a.opt("extraction").unwrap_or("turning") {
                "turning" => ControlRequest::Equilibrium(Extraction::Turning),
                "junction" => ControlRequest::Equilibrium(Extraction::Junction),
                other => return Err(perr(line, Some("extraction"), format!("unknown extraction `{other}`"))),
            },
            "mpc" => {
                let horizon = a.req_num("horizon")?;
                ControlRequest::Mpc { horizon, off_ramp: off_ramp(a)? }
            }
            "periodic" => {
                let period = a.req_num("period")?;
                ControlRequest::Periodic { period, off_ramp: off_ramp(a)? }
            }
            other => return Err(perr(line, Some("control"), format!("unknown control `{other}`"))),
        };
        a.finish(1)?;
        self.control = Some(c);
        Ok(())
    }

    fn assemble(self) -> Result<Scenario, ScenarioError> {
        let name = self.name.ok_or_else(|| perr(1, Some("scenario"), "missing `scenario <name>` line"))?;
        let n = self.cells.len();
        let check = |line: usize, field: &str, i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(perr(line, Some(field), format!("unknown cell {i}")))
            }
        };
        let mut cells = Vec::with_capacity(n);
        let mut ends = Vec::with_capacity(n);
        let mut names = Vec::with_capacity(n);
        for (c, t, h, name) in self.cells {
            cells.push(c);
            ends.push((t, h));
            names.push(name);
        }
        for (line, i, shape) in self.shapes {
            check(line, "id", i)?;
            cells[i].shape = shape;
        }
        let network = Network::new(cells, ends)?;

        let turning = if self.turns.is_empty() {
            TurningMatrix::uniform(&network)
        } else {
            let mut t = TurningMatrix::from_fn(&network, |_, _| 0.0);
            for (line, i, j, r) in self.turns {
                check(line, "from", i)?;
                t.set(i, j, r).map_err(|_| perr(line, Some("to"), format!("cell {j} does not follow cell {i}")))?;
            }
            t
        };
        let mut inflows = Inflows::none(&network);
        for (line, i, p) in self.inflows {
            check(line, "cell", i)?;
            inflows.set(i, p);
        }
        let policy = match self.policy {
            Some((_, Policy::PriorityMerge { .. })) => {
                let mut p = vec![0.5; n];
                for (pl, i, x) in self.priorities {
                    check(pl, "cell", i)?;
                    p[i] = x;
                }
                Policy::PriorityMerge { priorities: p }
            }
            Some((_, p)) => {
                if let Some(&(line, _, _)) = self.priorities.first() {
                    return Err(perr(line, Some("priority"), "priorities need `policy priority`"));
                }
                p
            }
            None => Policy::NonFifo,
        };
        let initial = if self.init_cells.is_empty() {
            self.init.unwrap_or(InitialState::Zero)
        } else {
            if self.init.is_some() {
                return Err(perr(self.init_cells[0].0, Some("init"), "mixes `init cell` with another initial state"));
            }
            let mut v = vec![0.0; n];
            for (line, i, x) in self.init_cells {
                check(line, "cell", i)?;
                v[i] = x;
            }
            InitialState::Values(v)
        };
        for inc in &self.incidents {
            if inc.cell >= n {
                return Err(ScenarioError::Network(NetworkError::UnknownCell(inc.cell)));
            }
        }
        let objective = match (self.objective, self.weights.is_empty()) {
            (Some(o), true) => o,
            (None, true) => Objective::total_volume(&network),
            (None, false) => {
                let mut w = vec![0.0; n];
                for (line, i, x) in self.weights {
                    check(line, "cell", i)?;
                    w[i] = x;
                }
                Objective::Weighted(w)
            }
            (Some(_), false) => {
                return Err(perr(self.weights[0].0, Some("weight"), "weights conflict with `objective evacuation`"))
            }
        };
        Ok(Scenario {
            name,
            cell_names: names,
            turning,
            inflows,
            policy,
            sim: self.sim.unwrap_or_default(),
            initial,
            incidents: self.incidents,
            objective,
            control: self.control.unwrap_or_default(),
            network,
        })
    }
}

/// Per-cell objective weights from a file of `cell weight` lines.
pub fn parse_weights(text: &str, cells: usize) -> Result<Vec<f64>, ScenarioError> {
    let mut w = vec![0.0; cells];
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        match tokens.as_slice() {
            [] => {}
            [i, x] => {
                let Ok(i) = i.parse::<usize>() else {
                    if line == 1 {
                        continue; // header
                    }
                    return Err(perr(line, Some("cell"), format!("`{i}` is not a cell id")));
                };
                if i >= cells {
                    return Err(perr(line, Some("cell"), format!("unknown cell {i}")));
                }
                w[i] = number(line, "weight", x)?;
            }
            _ => return Err(perr(line, None, "expected `cell weight`")),
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
scenario small
cell 0 kind=onramp tail=0 head=1 length=1 v=60 w=60 jam=inf
cell 1 kind=internal tail=1 head=2 length=1 v=60 w=60 jam=100 name=middle
cell 2 kind=offramp tail=2 head=0 length=1 v=60 w=60 jam=100 # exit
inflow 0 piecewise 0:5 10:2 period=20
sim dt=30 horizon=60
";

    #[test]
    fn parses_a_small_file() {
        let s = Scenario::parse(SMALL).unwrap();
        assert_eq!(s.network.len(), 3);
        assert_eq!(s.cell_names[1], "middle");
        assert_eq!(s.turning.get(1, 2), 1.0);
        assert_eq!(s.inflows.at(15.0)[0], 2.0);
        assert_eq!(s.inflows.at(25.0)[0], 5.0);
        assert_eq!(s.sim.dt(), 0.5);
        assert!(s.validate().is_empty(), "{:?}", s.validate());
    }

    #[test]
    fn round_trip() {
        let mut s = Scenario::parse(SMALL).unwrap();
        s.policy = Policy::Mixture { theta: 0.8 };
        s.incidents.push(Incident { time: 5.0, cell: 1, change: IncidentChange::Capacity(8.0) });
        s.initial = InitialState::Values(vec![1.0, 2.5, 0.0]);
        s.objective = Objective::Weighted(vec![0.0, 2.0, 1.0]);
        s.control = ControlRequest::Mpc { horizon: 5.0, off_ramp: OffRampRule::Exact };
        let again = Scenario::parse(&s.to_text()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.to_text(), s.to_text());
    }

    #[test]
    fn benchmark_round_trip_and_determinism() {
        for name in BUILTINS {
            let s = Scenario::builtin(name).unwrap();
            assert!(s.validate().is_empty(), "{name}: {:?}", s.validate());
            assert_eq!(Scenario::parse(&s.to_text()).unwrap(), s);
            assert_eq!(s.to_text(), Scenario::builtin(name).unwrap().to_text());
        }
    }

    #[test]
    fn errors_name_line_and_field() {
        let bad = SMALL.replace("v=60 w=60 jam=100 name", "v=fast w=60 jam=100 name");
        let e = Scenario::parse(&bad).unwrap_err();
        assert_eq!(e, perr(3, Some("v"), "`fast` is not a number"));
        assert_eq!(e.to_string(), "line 3, field `v`: `fast` is not a number");

        let e = Scenario::parse(&format!("{SMALL}turn 0 2 1\n")).unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 7, .. }), "{e}");
        let e = Scenario::parse(&format!("{SMALL}bogus 1\n")).unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 7, field: None, .. }));
        let e = Scenario::parse(&SMALL.replace("jam=inf", "jam=inf colour=red")).unwrap_err();
        assert_eq!(e, perr(2, Some("colour"), "unknown option"));
    }

    #[test]
    fn bottleneck_capacity() {
        let s = Scenario::builtin("la-bottleneck").unwrap();
        let net = s.initial_network().unwrap();
        let c = net.cell(la::cell_of_label(la::BOTTLENECK_LABEL)).capacity().finite().unwrap();
        assert!((c - 10.196).abs() < 1e-3, "{c}");
        let s = Scenario::builtin("la-capacity8").unwrap();
        let c = s.initial_network().unwrap().cell(26).capacity().finite().unwrap();
        assert!((c - 8.0).abs() < 1e-9);
    }

    #[test]
    fn weights_file() {
        let w = parse_weights("cell,weight\n0,1\n2 0.5\n", 3).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.5]);
        assert!(parse_weights("5 1\n", 3).is_err());
    }
}
