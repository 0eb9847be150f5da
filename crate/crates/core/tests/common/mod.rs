//! Random instances shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficnet::analysis::free_flow_equilibrium;
use trafficnet::lp::{Cmp, LinearProgram};
use trafficnet::{Bound, Cell, Network, TurningMatrix, EXTERNAL};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct RandomNet {
    pub net: Network,
    pub r: TurningMatrix,
    pub lambda: Vec<f64>,
    /// Step (minutes) keeping `dt (v + w) / (60 L) ≤ 0.9` on every cell.
    pub dt: f64,
    /// Priorities summing to one at every two-input merge.
    pub priorities: Vec<f64>,
}

const PENDING: usize = usize::MAX;

struct Draft {
    cells: Vec<(Cell, usize, usize)>,
    nodes: usize,
    open: Vec<usize>,
}

impl Draft {
    fn node(&mut self) -> usize {
        self.nodes += 1;
        self.nodes - 1
    }

    fn push(&mut self, c: Cell, tail: usize, head: usize) -> usize {
        self.cells.push((c, tail, head));
        self.cells.len() - 1
    }
}

fn internal(rng: &mut ChaCha8Rng) -> Cell {
    let l = rng.random_range(0.5..2.0);
    Cell::internal(l, rng.random_range(30.0..70.0), rng.random_range(10.0..25.0), rng.random_range(150.0..250.0))
}

fn on_ramp(rng: &mut ChaCha8Rng) -> Cell {
    Cell::on_ramp(0.5, rng.random_range(20.0..30.0), 13.0)
}

fn off_ramp(rng: &mut ChaCha8Rng) -> Cell {
    Cell::off_ramp(0.5, rng.random_range(20.0..30.0), 13.0, 200.0)
}

/// Acyclic network whose junctions are two-input merges, two-output
/// diverges or one-to-one links, with every cell draining to an off-ramp.
/// Arrivals are scaled so that free-flow flows stay below 60 % of capacity.
pub fn merge_diverge_network(rng: &mut ChaCha8Rng, max_junctions: usize) -> RandomNet {
    let mut d = Draft { cells: Vec::new(), nodes: 1, open: Vec::new() };
    let first = on_ramp(rng);
    let o = d.push(first, EXTERNAL, PENDING);
    d.open.push(o);
    let junctions = rng.random_range(1..=max_junctions.max(1));
    for _ in 0..junctions {
        if d.open.is_empty() {
            let c = on_ramp(rng);
            let o = d.push(c, EXTERNAL, PENDING);
            d.open.push(o);
        }
        let k = rng.random_range(0..d.open.len());
        let a = d.open.swap_remove(k);
        let v = d.node();
        d.cells[a].2 = v;
        let choice: f64 = rng.random();
        if choice < 0.45 {
            // merge with another open cell or a fresh on-ramp
            let b = if !d.open.is_empty() && rng.random_bool(0.5) {
                let k = rng.random_range(0..d.open.len());
                d.open.swap_remove(k)
            } else {
                let c = on_ramp(rng);
                d.push(c, EXTERNAL, PENDING)
            };
            d.cells[b].2 = v;
            let c = internal(rng);
            let out = d.push(c, v, PENDING);
            d.open.push(out);
        } else {
            for _ in 0..2 {
                if rng.random_bool(0.35) {
                    let c = off_ramp(rng);
                    d.push(c, v, EXTERNAL);
                } else {
                    let c = internal(rng);
                    let out = d.push(c, v, PENDING);
                    d.open.push(out);
                }
            }
        }
    }
    while let Some(a) = d.open.pop() {
        let v = d.node();
        d.cells[a].2 = v;
        let c = off_ramp(rng);
        d.push(c, v, EXTERNAL);
    }
    let ends: Vec<(usize, usize)> = d.cells.iter().map(|c| (c.1, c.2)).collect();
    let cells: Vec<Cell> = d.cells.into_iter().map(|c| c.0).collect();
    let net = Network::new(cells, ends).expect("consistent draft");

    let r = {
        let mut weights: Vec<Vec<f64>> = (0..net.len())
            .map(|i| net.successors(i).iter().map(|_| rng.random_range(0.2..1.0)).collect())
            .collect();
        for row in &mut weights {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        TurningMatrix::from_fn(&net, |i, j| weights[i][net.successor_index(i, j).unwrap()])
    };

    let mut lambda: Vec<f64> = (0..net.len())
        .map(|i| if net.is_on_ramp(i) { rng.random_range(0.5..5.0) } else { 0.0 })
        .collect();
    let f = free_flow_equilibrium(&net, &r, &lambda).expect("acyclic").flow;
    let scale = (0..net.len())
        .filter_map(|i| match net.cell(i).capacity() {
            Bound::Finite(c) if f[i] > 0.0 => Some(0.6 * c / f[i]),
            _ => None,
        })
        .fold(1.0f64, f64::min);
    lambda.iter_mut().for_each(|x| *x *= scale);

    let dt = 0.9
        * net
            .cells()
            .iter()
            .map(|c| 60.0 * c.length / (c.v + c.w))
            .fold(f64::INFINITY, f64::min);

    let mut priorities = vec![0.5; net.len()];
    for v in net.junctions() {
        if let [i, k] = net.node_in(v) {
            let p = rng.random_range(0.1..0.9);
            priorities[*i] = p;
            priorities[*k] = 1.0 - p;
        }
    }
    RandomNet { net, r, lambda, dt, priorities }
}

/// State strictly inside the box: `(2 %, 98 %)` of the jam volume, up to 50
/// vehicles on unbounded cells.
pub fn interior_state(rng: &mut ChaCha8Rng, net: &Network) -> Vec<f64> {
    net.cells()
        .iter()
        .map(|c| match c.jam {
            Bound::Finite(b) => rng.random_range(0.02..0.98) * b,
            Bound::Unbounded => rng.random_range(0.0..50.0),
        })
        .collect()
}

/// Small LP with integer data: up to 6 variables and 8 rows, mixed bounds
/// and comparison senses.
pub fn small_lp(rng: &mut ChaCha8Rng) -> LinearProgram {
    let mut lp = LinearProgram::new();
    let n = rng.random_range(1..=6);
    for j in 0..n {
        let cost = rng.random_range(-5..=5) as f64;
        let (lo, hi) = match rng.random_range(0..4) {
            0 => (0.0, f64::INFINITY),
            1 => (0.0, rng.random_range(1..=10) as f64),
            2 => {
                let lo = rng.random_range(-5..=2) as f64;
                (lo, lo + rng.random_range(0..=8) as f64)
            }
            _ => (rng.random_range(-3..=3) as f64, f64::INFINITY),
        };
        lp.add_var(format!("x{j}"), cost, lo, hi);
    }
    let m = rng.random_range(0..=8);
    for k in 0..m {
        let mut terms = Vec::new();
        for j in 0..n {
            if rng.random_bool(0.7) {
                terms.push((j, rng.random_range(-4..=4) as f64));
            }
        }
        let cmp = match rng.random_range(0..5) {
            0 => Cmp::Eq,
            1 => Cmp::Ge,
            _ => Cmp::Le,
        };
        lp.add_constraint(format!("r{k}"), terms, cmp, rng.random_range(-6..=12) as f64);
    }
    lp
}
