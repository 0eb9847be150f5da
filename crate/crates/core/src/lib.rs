//! Simulation, stability analysis and optimal control of cell-based traffic
//! networks.
//!
//! The state is the vehicle volume in each cell. Flows between consecutive
//! cells follow a junction [`policy::Policy`]; [`sim`] integrates the
//! dynamics, [`analysis`] studies equilibria through the dual graph, and
//! [`control`] selects controlled equilibria and runs receding-horizon
//! control on top of the [`lp`] solvers.

// Index loops mirror the per-cell formulas, and `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod lp;
pub mod network;
pub mod policy;
pub mod scenario;
pub mod sim;

pub use network::{Bound, Cell, CellId, CellKind, Network, NodeId, TurningMatrix, EXTERNAL};
pub use policy::{Controls, FlowMatrix, Policy};
pub use sim::{SimConfig, Trajectory};
