//! The Los Angeles freeway benchmark: five freeways (I-110, I-710, SR-91,
//! I-405 and their opposite directions) meeting at four interchanges.
//!
//! Every interchange is a single short intersection cell. Between two
//! interchanges a link is a chain of main-line cells and ramp triples; a
//! triple is an off-ramp, a short segment and an on-ramp, the off-ramp
//! always upstream of the on-ramp. Freeways entering from outside start with
//! an entry cell and leave through an exit cell; both use ramp parameters.
//!
//! Cells carry labels `1..=91` with cell id `label − 1`. A handful of labels
//! are pinned to fixed cells so that scenarios can name them: the I-405
//! triple at Carson St is `57-84-58` with the bottleneck main-line cell `27`
//! after it, interchange cell `69` splits four ways into `2, 12, 14, 20`,
//! and main-line cell `18` feeds off-ramp `53` and segment `74`.

use crate::network::{Bound, Cell, CellKind, InflowProfile, Inflows, Network, NodeId, Shape, TurningMatrix, EXTERNAL};

/// Label of the cell whose speed drops in the bottleneck scenarios.
pub const BOTTLENECK_LABEL: usize = 27;
/// Label of the segment of the ramp triple just upstream of the bottleneck.
pub const BOTTLENECK_SEGMENT_LABEL: usize = 84;

/// Arrivals at the freeway entries, veh/min.
pub const ENTRY_INFLOW: f64 = 20.0;
/// Arrivals at on-ramps, veh/min.
pub const RAMP_INFLOW: f64 = 2.0;
/// Turning fraction towards each off-ramp of a triple.
pub const OFF_RAMP_SHARE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Main,
    Intersection,
    Segment,
    OnRamp,
    OffRamp,
    Entry,
    Exit,
}

impl Kind {
    /// Length (mi), free-flow speed (mph), wave speed (mph), jam density
    /// (veh/mi, `None` unbounded).
    fn params(self) -> (f64, f64, f64, Option<f64>) {
        match self {
            Kind::Main => (2.0, 65.0, 13.0, Some(200.0)),
            Kind::Intersection => (0.2, 65.0, 13.0, Some(500.0)),
            Kind::Segment => (0.5, 65.0, 13.0, Some(200.0)),
            Kind::OnRamp | Kind::Entry => (0.5, 25.0, 13.0, None),
            Kind::OffRamp | Kind::Exit => (0.5, 25.0, 13.0, Some(200.0)),
        }
    }

    fn cell_kind(self) -> CellKind {
        match self {
            Kind::OnRamp | Kind::Entry => CellKind::OnRamp,
            Kind::OffRamp | Kind::Exit => CellKind::OffRamp,
            _ => CellKind::Internal,
        }
    }
}

#[derive(Clone, Copy)]
enum End {
    Outside,
    Interchange(usize),
}

/// `M` main-line cell, `T` ramp triple, `O` lone on-ramp.
struct Link {
    road: &'static str,
    from: End,
    items: &'static str,
    to: End,
}

const A: End = End::Interchange(0);
const B: End = End::Interchange(1);
const C: End = End::Interchange(2);
const D: End = End::Interchange(3);
const OUT: End = End::Outside;

const LINKS: [Link; 23] = [
    Link { road: "110S", from: OUT, items: "T", to: A },
    Link { road: "110S", from: A, items: "MMTMOM", to: B },
    Link { road: "110S", from: B, items: "", to: OUT },
    Link { road: "110N", from: OUT, items: "T", to: B },
    Link { road: "110N", from: B, items: "MMTMM", to: A },
    Link { road: "110N", from: A, items: "", to: OUT },
    Link { road: "710S", from: OUT, items: "T", to: C },
    Link { road: "710S", from: C, items: "MMTMTM", to: D },
    Link { road: "710S", from: D, items: "", to: OUT },
    Link { road: "710N", from: OUT, items: "T", to: D },
    Link { road: "710N", from: D, items: "MMTMTM", to: C },
    Link { road: "710N", from: C, items: "", to: OUT },
    Link { road: "91E", from: OUT, items: "", to: A },
    Link { road: "91E", from: A, items: "MMMTM", to: C },
    Link { road: "91E", from: C, items: "", to: OUT },
    Link { road: "91W", from: OUT, items: "", to: C },
    Link { road: "91W", from: C, items: "MMMTM", to: A },
    Link { road: "91W", from: A, items: "", to: OUT },
    Link { road: "405N", from: D, items: "MTM", to: B },
    Link { road: "405N", from: B, items: "", to: OUT },
    Link { road: "405S", from: OUT, items: "", to: B },
    Link { road: "405S", from: B, items: "MTMM", to: D },
    Link { road: "405S", from: D, items: "", to: OUT },
];

const INTERCHANGES: [&str; 4] = ["A", "B", "C", "D"];

/// `(label, build index)` for labels tied to specific cells; the remaining
/// labels go to the remaining cells in build order.
const PINNED: [(usize, usize); 17] = [
    (69, 0),
    (1, 4),
    (2, 8),
    (12, 28),
    (14, 60),
    (20, 76),
    (26, 77),
    (57, 78),
    (84, 79),
    (58, 80),
    (27, 81),
    (59, 85),
    (85, 86),
    (60, 87),
    (18, 34),
    (53, 35),
    (74, 36),
];

struct Builder {
    cells: Vec<(Kind, NodeId, NodeId, String)>,
    nodes: usize,
}

impl Builder {
    fn node(&mut self) -> NodeId {
        self.nodes += 1;
        self.nodes - 1
    }

    fn cell(&mut self, kind: Kind, tail: NodeId, head: NodeId, name: String) {
        self.cells.push((kind, tail, head, name));
    }
}

fn build_order() -> Vec<(Kind, NodeId, NodeId, String)> {
    let mut b = Builder { cells: Vec::new(), nodes: 1 };
    let mut ic = Vec::new();
    for x in INTERCHANGES {
        let (enter, leave) = (b.node(), b.node());
        b.cell(Kind::Intersection, enter, leave, format!("IC-{x}"));
        ic.push((enter, leave));
    }
    for link in &LINKS {
        let road = link.road;
        let mut cur = match link.from {
            End::Outside => {
                let n = b.node();
                b.cell(Kind::Entry, EXTERNAL, n, format!("{road}-entry"));
                n
            }
            End::Interchange(k) => ic[k].1,
        };
        if link.items.is_empty() {
            if let (End::Outside, End::Interchange(k)) = (link.from, link.to) {
                // the entry cell feeds the interchange directly
                b.cells.last_mut().expect("entry cell").2 = ic[k].0;
                cur = ic[k].0;
            }
        }
        let count = link.items.len();
        for (k, item) in link.items.chars().enumerate() {
            if item == 'O' {
                b.cell(Kind::OnRamp, EXTERNAL, cur, format!("{road}-on"));
                continue;
            }
            let next = match link.to {
                End::Interchange(x) if k + 1 == count => ic[x].0,
                _ => b.node(),
            };
            match item {
                'M' => b.cell(Kind::Main, cur, next, format!("{road}-M")),
                'T' => {
                    b.cell(Kind::OffRamp, cur, EXTERNAL, format!("{road}-off"));
                    b.cell(Kind::Segment, cur, next, format!("{road}-seg"));
                    b.cell(Kind::OnRamp, EXTERNAL, next, format!("{road}-on"));
                }
                _ => unreachable!("unknown link item {item}"),
            }
            cur = next;
        }
        if let End::Outside = link.to {
            b.cell(Kind::Exit, cur, EXTERNAL, format!("{road}-exit"));
        }
    }
    b.cells
}

/// Build index of the cell carrying each label (index `label − 1`).
fn label_order(n: usize) -> Vec<usize> {
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut taken = vec![false; n];
    for (label, idx) in PINNED {
        slot[label - 1] = Some(idx);
        taken[idx] = true;
    }
    let mut free = (0..n).filter(|&i| !taken[i]);
    slot.into_iter()
        .map(|s| s.unwrap_or_else(|| free.next().expect("as many labels as cells")))
        .collect()
}

/// Network, turning preferences, arrivals and cell names of the benchmark.
pub struct Benchmark {
    pub network: Network,
    pub turning: TurningMatrix,
    pub inflows: Inflows,
    pub names: Vec<String>,
}

pub fn generate() -> Benchmark {
    let built = build_order();
    let order = label_order(built.len());
    let mut cells = Vec::with_capacity(built.len());
    let mut ends = Vec::with_capacity(built.len());
    let mut names = Vec::with_capacity(built.len());
    let mut kinds = Vec::with_capacity(built.len());
    for &idx in &order {
        let (kind, tail, head, ref name) = built[idx];
        let (l, v, w, jam) = kind.params();
        cells.push(Cell {
            length: l,
            kind: kind.cell_kind(),
            v,
            w,
            jam: jam.map_or(Bound::Unbounded, |b| Bound::Finite(b * l)),
            saturation: Bound::Unbounded,
            shape: Shape::Affine,
        });
        ends.push((tail, head));
        names.push(name.clone());
        kinds.push(kind);
    }
    let network = Network::new(cells, ends).expect("benchmark geometry is consistent");

    let turning = TurningMatrix::from_fn(&network, |i, j| {
        let succ = network.successors(i);
        let ramps = succ.iter().filter(|&&k| kinds[k] == Kind::OffRamp).count();
        let rest = succ.len() - ramps;
        match (kinds[j] == Kind::OffRamp, rest) {
            (true, 0) => 1.0 / ramps as f64,
            (true, _) => OFF_RAMP_SHARE,
            (false, _) => (1.0 - OFF_RAMP_SHARE * ramps as f64) / rest as f64,
        }
    });

    let mut inflows = Inflows::none(&network);
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            Kind::Entry => inflows.set(i, InflowProfile::Constant(ENTRY_INFLOW)),
            Kind::OnRamp => inflows.set(i, InflowProfile::Constant(RAMP_INFLOW)),
            _ => {}
        }
    }
    Benchmark { network, turning, inflows, names }
}

/// Cell id of a benchmark label.
pub fn cell_of_label(label: usize) -> usize {
    label - 1
}

pub fn label_of_cell(cell: usize) -> usize {
    cell + 1
}
