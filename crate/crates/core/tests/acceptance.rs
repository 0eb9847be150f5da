//! Acceptance suite: one `ACCEPTANCE <id> PASS|FAIL` line per criterion,
//! written straight to stderr so it shows up in captured test runs too.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{interior_state, merge_diverge_network, rng, small_lp};
use rand::Rng;
use trafficnet::analysis::{
    find_equilibrium_by_simulation, free_flow_equilibrium, EquilibriumOutcome, EquilibriumReport, SearchOptions,
};
use trafficnet::control::{
    mpc_loop, periodic_selection, select_equilibrium, verify_controlled_equilibrium, volume_cost, Extraction,
    MpcOptions, Objective, OffRampRule, TurningSchedule,
};
use trafficnet::lp::{enumerate_vertices_oracle, solve_with, Backend, Status};
use trafficnet::network::{InflowProfile, Inflows};
use trafficnet::policy::{check_monotonicity, compute_flows, Controls};
use trafficnet::scenario::{la, Scenario};
use trafficnet::sim::{cfl_number, l1, l1_distance_series, simulate};
use trafficnet::{Bound, Cell, Network, Policy, SimConfig, TurningMatrix, EXTERNAL};

fn report(id: &str, pass: bool, detail: String) {
    let line = format!("ACCEPTANCE {id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

const DT: f64 = 10.0 / 60.0;
const THREE_HOURS: f64 = 180.0;

fn la_net(name: &str) -> (Scenario, Network) {
    let s = Scenario::builtin(name).unwrap();
    let net = s.initial_network().unwrap();
    (s, net)
}

fn equilibrium(net: &Network, policy: &Policy, s: &Scenario) -> Option<EquilibriumReport> {
    match find_equilibrium_by_simulation(net, policy, &s.turning, &s.inflows, &SearchOptions::default()).unwrap() {
        EquilibriumOutcome::Bounded(r) => Some(*r),
        _ => None,
    }
}

#[test]
fn criterion_1_cfl() {
    let (_, net) = la_net("la");
    let cfl = cfl_number(&net, DT);
    report("1", (cfl - 0.9028).abs() <= 1e-4, format!("CFL at 10 s = {cfl:.6} (want 0.9028 ± 1e-4)"));
}

#[test]
fn criterion_2_free_flow_gas() {
    let start = Instant::now();
    let (s, net) = la_net("la");
    let lambda = s.inflows.at(0.0);
    let star = free_flow_equilibrium(&net, &s.turning, &lambda).unwrap().rho.expect("free-flow equilibrium");
    let config = SimConfig::new(Policy::NonFifo, DT, THREE_HOURS);
    let from_zero = simulate(&net, &s.turning, &s.inflows, &config, &vec![0.0; net.len()]).unwrap();
    let tripled: Vec<f64> = star.iter().map(|x| 3.0 * x).collect();
    let from_three = simulate(&net, &s.turning, &s.inflows, &config, &tripled).unwrap();
    let e0 = l1(from_zero.last(), &star);
    let e3 = l1(from_three.last(), &star);
    let dist = l1_distance_series(&from_zero, &from_three).unwrap();
    let worst = dist.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let pass = e0 < 1.0 && e3 < 1.0 && worst <= 1e-6;
    report(
        "2",
        pass,
        format!(
            "|rho(T)-rho*|_1 = {e0:.3e} (zero start), {e3:.3e} (3 rho* start); largest l1 increase per step {worst:.3e}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

/// On-ramp 0 and the return cell 2 merge into 1, which splits into 2 and
/// the off-ramp 3; `d(ρ) = ρ` per minute everywhere.
fn example_loop() -> (Network, TurningMatrix) {
    let cells = vec![
        Cell::on_ramp(1.0, 60.0, 60.0),
        Cell::internal(1.0, 60.0, 60.0, 100.0),
        Cell::internal(1.0, 60.0, 60.0, 100.0),
        Cell::off_ramp(1.0, 60.0, 60.0, 100.0),
    ];
    let net = Network::new(cells, vec![(EXTERNAL, 1), (1, 2), (2, 1), (2, EXTERNAL)]).unwrap();
    let r = TurningMatrix::from_entries(&net, &[(0, 1, 1.0), (1, 2, 0.5), (1, 3, 0.5), (2, 1, 1.0)]).unwrap();
    (net, r)
}

#[test]
fn criterion_3_fifo_not_gas() {
    let (s, net) = la_net("la");
    let config = SimConfig::new(Policy::Fifo, DT, THREE_HOURS);
    let jammed: Vec<f64> = net.cells().iter().map(|c| c.jam.finite().unwrap_or(100.0)).collect();
    let a = simulate(&net, &s.turning, &s.inflows, &config, &jammed).unwrap();
    let b = simulate(&net, &s.turning, &s.inflows, &config, &vec![0.0; net.len()]).unwrap();
    let dist = l1_distance_series(&a, &b).unwrap();
    let rises = dist.windows(2).filter(|w| w[1] > w[0] + 1e-6).count();
    let gap = dist.last().copied().unwrap_or(0.0);

    // the trapped trajectory of the loop example
    let (lnet, lr) = example_loop();
    let lambda = 5.0;
    let rho0 = 7.0;
    let mut inflows = Inflows::none(&lnet);
    inflows.set(0, InflowProfile::Constant(lambda));
    let dt = 0.5;
    let steps = 200;
    let cfg = SimConfig::new(Policy::Fifo, dt, dt * steps as f64);
    let traj = simulate(&lnet, &lr, &inflows, &cfg, &[rho0, 100.0, 100.0, 0.0]).unwrap();
    let mut err = 0.0f64;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        err = err.max((x[0] - (rho0 + lambda * t)).abs());
        err = err.max((x[1] - 100.0).abs()).max((x[2] - 100.0).abs()).max(x[3].abs());
    }
    let pass = rises > 0 && err < 1e-9;
    report(
        "3",
        pass,
        format!(
            "LA FIFO l1 gap rises on {rises} steps, ends at {gap:.1}; loop example worst deviation {err:.1e} over {steps} steps"
        ),
    );
}

#[test]
fn criterion_4_bottleneck_regimes() {
    let start = Instant::now();
    let (s, net) = la_net("la-bottleneck");
    let b = la::cell_of_label(la::BOTTLENECK_LABEL);
    let seg = la::cell_of_label(la::BOTTLENECK_SEGMENT_LABEL);
    let lambda = s.inflows.at(0.0);
    let f27 = free_flow_equilibrium(&net, &s.turning, &lambda).unwrap().flow[b];
    let cap = net.cell(b).capacity().finite().unwrap();

    let nf = equilibrium(&net, &Policy::NonFifo, &s);
    let mut congested_ok = false;
    let mut gas = false;
    let mut nf_total = f64::NAN;
    let mut congested_labels = Vec::new();
    if let Some(r) = &nf {
        let mut c = r.congested();
        c.sort();
        congested_labels = c.iter().map(|&i| la::label_of_cell(i)).collect();
        let mut want = vec![b, seg];
        want.sort();
        congested_ok = c == want;
        gas = r.globally_stable;
        nf_total = r.total_volume();
    }

    let config = SimConfig::new(Policy::Fifo, DT, THREE_HOURS);
    let fifo = simulate(&net, &s.turning, &s.inflows, &config, &vec![0.0; net.len()]).unwrap();
    let totals = fifo.total_volume();
    let last_hour = &totals[totals.len() - 1 - (60.0 / DT).round() as usize..];
    let fifo_growing = last_hour.windows(2).all(|w| w[1] > w[0]);

    let mix = equilibrium(&net, &Policy::Mixture { theta: 0.8 }, &s);
    let mix_total = mix.as_ref().map_or(f64::NAN, |r| r.total_volume());

    let pass = (14.0..=16.0).contains(&f27) && congested_ok && gas && fifo_growing && mix_total > nf_total;
    report(
        "4",
        pass,
        format!(
            "C27 = {cap:.3}, f*27 = {f27:.3}; NonFIFO congested labels {congested_labels:?}, GAS {gas}, total {nf_total:.1}; \
             FIFO growing over last hour {fifo_growing} (ends at {:.0}); mixture 0.8 total {mix_total:.1}; {:.1}s",
            totals.last().unwrap(),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_equilibrium_selection() {
    let (s, net) = la_net("la-capacity8");
    let seg = la::cell_of_label(la::BOTTLENECK_SEGMENT_LABEL);
    let lambda = s.inflows.at(0.0);
    let unc = equilibrium(&net, &Policy::NonFifo, &s).expect("bounded uncontrolled equilibrium");
    let sel = select_equilibrium(
        &net,
        &s.turning,
        &lambda,
        &Objective::total_volume(&net),
        Extraction::Turning,
        Backend::Auto,
    )
    .unwrap();
    let controlled: f64 = sel.point.x.iter().sum();
    let ratio = unc.total_volume() / controlled;
    let into_branch: f64 = net.predecessors(seg).iter().map(|&i| sel.point.flow(&net, i, seg)).sum();
    let v = verify_controlled_equilibrium(&net, &Policy::NonFifo, &s.turning, &sel.controls, &sel.point.x, &lambda)
        .unwrap();
    let pass = ratio >= 3.0 && into_branch < 1e-6 && v.passed;
    report(
        "5",
        pass,
        format!(
            "uncontrolled total {:.2}, controlled {controlled:.2}, ratio {ratio:.3}; flow into branch {into_branch:.1e}; \
             controlled residual {:.1e}",
            unc.total_volume(),
            v.residual
        ),
    );
}

#[test]
fn criterion_6_mpc() {
    let start = Instant::now();
    let (s, net) = la_net("la-mpc");
    let rho0 = s.initial_volumes();
    let config = SimConfig::new(Policy::NonFifo, DT, THREE_HOURS);
    let unc = simulate(&net, &s.turning, &s.inflows, &config, &rho0).unwrap();
    let unc_cost = volume_cost(&unc);
    let opts = MpcOptions::new(&net, 5.0, DT, THREE_HOURS);
    let out = mpc_loop(&net, &TurningSchedule::constant(s.turning.clone()), &s.inflows, &rho0, &opts).unwrap();
    let gain = 1.0 - out.cost / unc_cost;
    let pass = out.aborted.is_none() && gain >= 0.10;
    report(
        "6",
        pass,
        format!(
            "cost uncontrolled {unc_cost:.0}, controlled {:.0} ({:.1}% lower); {} solves of {} vars x {} rows; {:.1}s",
            out.cost,
            100.0 * gain,
            out.solves,
            out.lp_size.0,
            out.lp_size.1,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7a_monotonicity() {
    let mut g = rng(7001);
    let mut nf_bad = 0;
    let mut pm_bad = 0;
    for k in 0..500 {
        if k % 10 == 0 {
            g = rng(7001 + k);
        }
        let rn = merge_diverge_network(&mut g, 6);
        let rho = interior_state(&mut g, &rn.net);
        let c = Controls::identity(rn.net.len());
        let nf = check_monotonicity(&rn.net, &Policy::NonFifo, &rn.r, &c, &rho, &rn.lambda, 1.0).unwrap();
        let pm = Policy::PriorityMerge { priorities: rn.priorities.clone() };
        let pm = check_monotonicity(&rn.net, &pm, &rn.r, &c, &rho, &rn.lambda, 1.0).unwrap();
        nf_bad += usize::from(!nf.violations.is_empty());
        pm_bad += usize::from(!pm.violations.is_empty());
    }
    // both branches of a diverge below their demand share
    let cells = vec![
        Cell::on_ramp(1.0, 60.0, 60.0),
        Cell::internal(1.0, 60.0, 60.0, 100.0),
        Cell::off_ramp(1.0, 60.0, 60.0, 100.0),
        Cell::off_ramp(1.0, 60.0, 60.0, 100.0),
    ];
    let net = Network::new(cells, vec![(EXTERNAL, 1), (1, 2), (2, EXTERNAL), (2, EXTERNAL)]).unwrap();
    let r = TurningMatrix::uniform(&net);
    let fifo = check_monotonicity(&net, &Policy::Fifo, &r, &Controls::identity(4), &[0.0, 80.0, 90.0, 80.0], &[0.0; 4], 1.0)
        .unwrap();
    let pass = nf_bad == 0 && pm_bad == 0 && !fifo.violations.is_empty();
    report(
        "7a",
        pass,
        format!(
            "500 random states: NonFIFO violations {nf_bad}, priority-merge violations {pm_bad}; FIFO constructed violations {}",
            fifo.violations.len()
        ),
    );
}

#[test]
fn criterion_7b_contraction() {
    let mut worst = f64::NEG_INFINITY;
    for k in 0..100 {
        let mut g = rng(7100 + k);
        let rn = merge_diverge_network(&mut g, 6);
        let a = interior_state(&mut g, &rn.net);
        let b = interior_state(&mut g, &rn.net);
        let inflows = Inflows::constant(&rn.net, |i| rn.lambda[i]);
        let config = SimConfig::new(Policy::NonFifo, rn.dt, rn.dt * 200.0);
        let ta = simulate(&rn.net, &rn.r, &inflows, &config, &a).unwrap();
        let tb = simulate(&rn.net, &rn.r, &inflows, &config, &b).unwrap();
        let d = l1_distance_series(&ta, &tb).unwrap();
        worst = d.windows(2).map(|w| w[1] - w[0]).fold(worst, f64::max);
    }
    report("7b", worst <= 1e-9, format!("100 pairs: largest per-step l1 increase {worst:.2e}"));
}

#[test]
fn criterion_7c_order() {
    let mut worst = f64::NEG_INFINITY;
    for k in 0..100 {
        let mut g = rng(7200 + k);
        let rn = merge_diverge_network(&mut g, 6);
        let lo = interior_state(&mut g, &rn.net);
        let hi: Vec<f64> = lo
            .iter()
            .zip(rn.net.cells())
            .map(|(&x, c)| match c.jam {
                Bound::Finite(b) => x + g.random_range(0.0..1.0) * (b - x),
                Bound::Unbounded => x + g.random_range(0.0..20.0),
            })
            .collect();
        let inflows = Inflows::constant(&rn.net, |i| rn.lambda[i]);
        let config = SimConfig::new(Policy::NonFifo, rn.dt, rn.dt * 200.0);
        let ta = simulate(&rn.net, &rn.r, &inflows, &config, &lo).unwrap();
        let tb = simulate(&rn.net, &rn.r, &inflows, &config, &hi).unwrap();
        for (x, y) in ta.states.iter().zip(&tb.states) {
            worst = x.iter().zip(y).map(|(a, b)| a - b).fold(worst, f64::max);
        }
    }
    report("7c", worst <= 1e-12, format!("100 ordered pairs: largest order violation {worst:.2e}"));
}

#[test]
fn criterion_7d_lp_oracle() {
    let mut g = rng(7300);
    let mut disagree = 0;
    let mut worst = 0.0f64;
    let mut counts = [0usize; 3];
    for _ in 0..200 {
        let lp = small_lp(&mut g);
        let want = enumerate_vertices_oracle(&lp).unwrap();
        for backend in [Backend::Dense, Backend::Sparse] {
            let got = solve_with(&lp, backend).unwrap();
            if got.status != want.status {
                disagree += 1;
            } else if want.status == Status::Optimal {
                worst = worst.max((got.objective - want.objective).abs());
            }
        }
        counts[match want.status {
            Status::Optimal => 0,
            Status::Infeasible => 1,
            Status::Unbounded => 2,
        }] += 1;
    }
    let pass = disagree == 0 && worst <= 1e-7;
    report(
        "7d",
        pass,
        format!(
            "200 LPs ({} optimal, {} infeasible, {} unbounded), dense and sparse: {disagree} status mismatches, worst objective gap {worst:.1e}",
            counts[0], counts[1], counts[2]
        ),
    );
}

#[test]
fn criterion_7e_control_extraction() {
    let mut worst_residual = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for k in 0..50 {
        let mut g = rng(7400 + k);
        let rn = merge_diverge_network(&mut g, 6);
        let eta: Vec<f64> = (0..rn.net.len()).map(|_| g.random_range(0.1..2.0)).collect();
        for extraction in [Extraction::Turning, Extraction::Junction] {
            let sel = match select_equilibrium(&rn.net, &rn.r, &rn.lambda, &Objective::Weighted(eta.clone()), extraction, Backend::Dense) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("instance {k}: {e}"));
                    continue;
                }
            };
            let v = verify_controlled_equilibrium(&rn.net, &Policy::NonFifo, &rn.r, &sel.controls, &sel.point.x, &rn.lambda)
                .unwrap();
            worst_residual = worst_residual.max(v.residual);
            let t = sel.controls.turning(&rn.r);
            for i in 0..rn.net.len() {
                for &j in rn.net.successors(i) {
                    worst_excess = worst_excess.max(sel.controls.alpha[i] * t.get(i, j) - rn.r.get(i, j));
                }
            }
        }
    }
    let pass = failures.is_empty() && worst_residual < 1e-6 && worst_excess <= 1e-12;
    report(
        "7e",
        pass,
        format!(
            "50 instances x 2 extractions: worst residual {worst_residual:.1e}, worst alpha*R - R^u {worst_excess:.1e}, failures {failures:?}"
        ),
    );
}

#[test]
fn criterion_7f_priority_merge() {
    // on-ramps 0 and 1 merge into 2, which leaves through off-ramp 3
    let mut g = rng(7500);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l = g.random_range(0.5..2.0);
        let cells = vec![
            Cell::on_ramp(0.5, g.random_range(20.0..60.0), 13.0),
            Cell::on_ramp(0.5, g.random_range(20.0..60.0), 13.0),
            Cell::internal(l, 60.0, g.random_range(10.0..30.0), 200.0),
            Cell::off_ramp(0.5, 25.0, 13.0, 200.0),
        ];
        let net = Network::new(cells, vec![(EXTERNAL, 1), (EXTERNAL, 1), (1, 2), (2, EXTERNAL)]).unwrap();
        let r = TurningMatrix::uniform(&net);
        let p = g.random_range(0.05..0.95);
        let policy = Policy::PriorityMerge { priorities: vec![p, 1.0 - p, 0.5, 0.5] };
        let b2 = net.cell(2).jam.finite().unwrap();
        // demand of the two ramps exceeds what cell 2 can take
        let rho2 = g.random_range(0.5..0.99) * b2;
        let s2 = net.cell(2).uncontrolled_supply(rho2).finite().unwrap();
        let (d0, d1) = (net.cell(0).demand_coeff(), net.cell(1).demand_coeff());
        let share = g.random_range(0.1..0.9);
        let total = s2 * g.random_range(1.05..3.0);
        let rho = [share * total / d0, (1.0 - share) * total / d1, rho2, 10.0];
        let f = compute_flows(&net, &policy, &r, &Controls::identity(4), &rho, &[0.0; 4]).unwrap();
        worst = worst.max((f.inflow[2] - s2).abs());
    }
    report("7f", worst <= 1e-10, format!("200 congested merges: worst |f_ij + f_kj - s_j| = {worst:.1e}"));
}

#[test]
fn criterion_7g_periodic() {
    // off-ramp drains 90 % of its volume per step
    let cells = vec![
        Cell::on_ramp(1.0, 60.0, 60.0),
        Cell::internal(1.0, 60.0, 60.0, 100.0),
        Cell::off_ramp(1.0, 108.0, 60.0, 100.0),
    ];
    let net = Network::new(cells, vec![(EXTERNAL, 1), (1, 2), (2, EXTERNAL)]).unwrap();
    let r = TurningMatrix::uniform(&net);
    let mut inflows = Inflows::none(&net);
    let base = InflowProfile::Piecewise(vec![(0.0, 20.0), (5.0, 5.0)]);
    inflows.set(0, InflowProfile::Periodic { period: 10.0, base: Box::new(base) });
    let sel = periodic_selection(
        &net,
        &TurningSchedule::constant(r),
        &inflows,
        10.0,
        0.5,
        &Objective::total_volume(&net),
        OffRampRule::Inequality,
        &Policy::NonFifo,
        Backend::Dense,
    )
    .unwrap();
    let pass = sel.wrap < 1e-7 && sel.periodicity < 1e-5;
    report(
        "7g",
        pass,
        format!("3-cell line: wrap residual {:.1e}, simulated |x(T)-x(2T)|_1 {:.1e}", sel.wrap, sel.periodicity),
    );
}
