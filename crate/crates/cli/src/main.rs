//! Command-line front end: loads a scenario, runs one analysis and writes CSV
//! results into an output directory.

use std::error::Error;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use trafficnet::analysis::{
    dual_graph, find_equilibrium_by_simulation, free_flow_equilibrium, jacobian_free_flow_stable, EquilibriumOutcome,
    EquilibriumReport, SearchOptions,
};
use trafficnet::control::{
    mpc_loop, periodic_selection, select_equilibrium, verify_controlled_equilibrium, volume_cost, write_control_csv,
    Extraction, MpcOptions, Objective, OffRampRule, TurningSchedule,
};
use trafficnet::lp::Backend;
use trafficnet::network::Network;
use trafficnet::policy::Controls;
use trafficnet::scenario::{parse_off_ramp_rule, parse_weights, ControlRequest, Scenario, BUILTINS};
use trafficnet::sim::{cfl_number, l1, simulate, ControlSchedule, Trajectory};
use trafficnet::Policy;

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "trafficnet", version, about = "Simulate, analyze and control cell-transmission traffic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the scenario and report structural problems.
    Validate(Common),
    /// Simulate and write the trajectory and total volume.
    Simulate(Common),
    /// Free-flow equilibrium, Jacobian test and step-size check.
    Analyze(Common),
    /// Run from the empty network to a bounded equilibrium and classify it.
    Equilibrium(Common),
    /// Select an optimal controlled equilibrium and compare with the uncontrolled one.
    Select {
        #[command(flatten)]
        common: Common,
        /// Control extraction: `turning` or `junction`.
        #[arg(long)]
        extraction: Option<String>,
    },
    /// Receding-horizon control over the simulation horizon.
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Re-solve interval and look-ahead, minutes.
        #[arg(long)]
        window: Option<f64>,
        /// `inequality` or `exact`.
        #[arg(long)]
        offramp: Option<String>,
    },
    /// Select a periodic trajectory for periodic arrivals.
    Periodic {
        #[command(flatten)]
        common: Common,
        /// Period, minutes.
        #[arg(long)]
        period: Option<f64>,
        /// `inequality` or `exact`.
        #[arg(long)]
        offramp: Option<String>,
    },
    /// Simulate the mixture policy for every `--theta` in parallel.
    ComparePolicies(Common),
    /// Write a builtin scenario to a file.
    Benchmark {
        /// One of the builtin names.
        #[arg(default_value = "la")]
        name: String,
        #[arg(long, default_value = "la.scn")]
        output: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file, or `@name` for a builtin.
    #[arg(long)]
    scenario: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Step, seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Simulated time, minutes.
    #[arg(long)]
    horizon: Option<f64>,
    /// `nonfifo`, `fifo`, `line`, `mixture` or `priority`.
    #[arg(long)]
    policy: Option<String>,
    /// Mixture weights; comma separated for compare-policies.
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    /// File of per-cell objective weights.
    #[arg(long)]
    objective: Option<PathBuf>,
}

struct Loaded {
    scenario: Scenario,
    net: Network,
    objective: Objective,
    out: PathBuf,
}

fn policy_from(name: &str, theta: Option<f64>, scenario: &Scenario) -> Res<Policy> {
    Ok(match name {
        "nonfifo" => Policy::NonFifo,
        "fifo" => Policy::Fifo,
        "line" => Policy::LineCtm,
        "mixture" => Policy::Mixture { theta: theta.ok_or("policy mixture needs --theta")? },
        "priority" => match &scenario.policy {
            Policy::PriorityMerge { .. } => scenario.policy.clone(),
            _ => return Err("policy priority needs priorities in the scenario file".into()),
        },
        other => return Err(format!("unknown policy `{other}`").into()),
    })
}

impl Common {
    fn load(&self) -> Res<Loaded> {
        let mut scenario = Scenario::open(&self.scenario)?;
        if let Some(dt) = self.dt {
            scenario.sim.dt_seconds = dt;
        }
        if let Some(h) = self.horizon {
            scenario.sim.horizon = h;
        }
        match (&self.policy, self.theta.as_slice()) {
            (Some(p), t) => scenario.policy = policy_from(p, t.first().copied(), &scenario)?,
            (None, [t]) => scenario.policy = Policy::from_theta(*t),
            _ => {}
        }
        let objective = match &self.objective {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                Objective::Weighted(parse_weights(&text, scenario.network.len())?)
            }
            None => scenario.objective.clone(),
        };
        let problems = scenario.validate();
        if !problems.is_empty() {
            let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
            return Err(format!("invalid scenario:\n  {}", list.join("\n  ")).into());
        }
        let net = scenario.initial_network()?;
        fs::create_dir_all(&self.out).map_err(|e| format!("{}: {e}", self.out.display()))?;
        Ok(Loaded { scenario, net, objective, out: self.out.clone() })
    }
}

fn create(dir: &Path, name: &str) -> Res<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_series(dir: &Path, name: &str, header: &[&str], times: &[f64], columns: &[Vec<f64>]) -> Res<()> {
    let mut w = create(dir, name)?;
    writeln!(w, "t,{}", header.join(","))?;
    for (k, t) in times.iter().enumerate() {
        write!(w, "{t}")?;
        for c in columns {
            match c.get(k) {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trajectory(dir: &Path, prefix: &str, traj: &Trajectory) -> Res<()> {
    let mut w = create(dir, &format!("{prefix}trajectory.csv"))?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    write_series(dir, &format!("{prefix}total_volume.csv"), &["total"], &traj.times, &[traj.total_volume()])
}

fn write_equilibrium(dir: &Path, name: &str, r: &EquilibriumReport) -> Res<()> {
    let mut w = create(dir, name)?;
    writeln!(w, "cell,rho,flow,regime,demand_served")?;
    for i in 0..r.rho.len() {
        let regime = format!("{:?}", r.regime[i]).to_lowercase();
        writeln!(w, "{i},{},{},{regime},{}", r.rho[i], r.flow[i], r.demand_served[i])?;
    }
    w.flush()?;
    Ok(())
}

fn describe(outcome: &EquilibriumOutcome) -> String {
    match outcome {
        EquilibriumOutcome::Bounded(r) => format!(
            "bounded, total {:.3} veh, congested cells {:?}, globally stable {}",
            r.total_volume(),
            r.congested(),
            r.globally_stable
        ),
        EquilibriumOutcome::Divergent { time, total_volume } => {
            format!("divergent, total {total_volume:.1} veh after {time:.1} min")
        }
        EquilibriumOutcome::Undecided { time, residual } => {
            format!("undecided after {time:.1} min, residual {residual:.3e}")
        }
    }
}

fn search_options(s: &Scenario) -> SearchOptions {
    SearchOptions { dt: s.sim.dt(), ..SearchOptions::default() }
}

fn extraction_from(name: &str) -> Res<Extraction> {
    match name {
        "turning" => Ok(Extraction::Turning),
        "junction" => Ok(Extraction::Junction),
        other => Err(format!("unknown extraction `{other}`").into()),
    }
}

fn off_ramp_from(name: Option<&str>, default: OffRampRule) -> Res<OffRampRule> {
    match name {
        Some(n) => parse_off_ramp_rule(n).ok_or_else(|| format!("unknown off-ramp rule `{n}`").into()),
        None => Ok(default),
    }
}

fn validate_cmd(c: &Common) -> Res<()> {
    let s = Scenario::open(&c.scenario)?;
    let problems = s.validate();
    let dt = c.dt.unwrap_or(s.sim.dt_seconds) / 60.0;
    println!("scenario: {}", s.name);
    println!("cells: {}", s.network.len());
    println!("cfl: {:.4}", cfl_number(&s.initial_network()?, dt));
    for p in &problems {
        println!("problem: {p}");
    }
    if problems.is_empty() {
        println!("valid");
        Ok(())
    } else {
        Err(format!("{} problem(s) found", problems.len()).into())
    }
}

fn simulate_cmd(c: &Common) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let started = Instant::now();
    let traj = simulate(&s.network, &s.turning, &s.inflows, &s.sim_config(), &s.initial_volumes())?;
    write_trajectory(&l.out, "", &traj)?;
    println!("policy: {}", s.policy.name());
    println!("steps: {}", traj.states.len() - 1);
    println!("final total volume: {:.3}", traj.total_volume().last().copied().unwrap_or(0.0));
    println!("max conservation residual: {:.3e}", traj.max_conservation_residual);
    if s.incidents.iter().all(|i| i.time <= 0.0) {
        let ff = free_flow_equilibrium(&l.net, &s.turning, &s.inflows.at(0.0))?;
        if let Some(star) = ff.rho {
            let d: Vec<f64> = traj.states.iter().map(|x| l1(x, &star)).collect();
            println!("final l1 distance to free-flow equilibrium: {:.6}", d.last().copied().unwrap_or(0.0));
            write_series(&l.out, "l1_to_free_flow.csv", &["l1"], &traj.times, &[d])?;
        }
    }
    println!("runtime: {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn analyze_cmd(c: &Common) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let lambda = s.inflows.at(0.0);
    println!("cfl: {:.4}", cfl_number(&l.net, s.sim.dt()));
    println!("policy: {} (monotone {})", s.policy.name(), s.policy.is_monotone());
    let ff = free_flow_equilibrium(&l.net, &s.turning, &lambda)?;
    let mut w = create(&l.out, "free_flow.csv")?;
    writeln!(w, "cell,flow,capacity,rho")?;
    for i in 0..l.net.len() {
        let cap = l.net.cell(i).capacity().finite().map_or(String::from("inf"), |x| x.to_string());
        let rho = ff.rho.as_ref().map_or(String::new(), |r| r[i].to_string());
        writeln!(w, "{i},{},{cap},{rho}", ff.flow[i])?;
    }
    w.flush()?;
    match &ff.rho {
        Some(rho) => {
            let j = jacobian_free_flow_stable(&l.net, &s.turning, rho);
            println!("free-flow equilibrium: feasible, total {:.3} veh", rho.iter().sum::<f64>());
            println!(
                "jacobian: metzler {}, column sums {}, spectral abscissa {:.4e}, stable {}",
                j.metzler, j.column_sums, j.spectral_abscissa, j.stable
            );
            let g = dual_graph(&l.net, &s.policy, &s.turning, &Controls::identity(l.net.len()), rho, &lambda, 1.0)?;
            g.write_dot(create(&l.out, "dual_graph.dot")?)?;
        }
        None => println!("free-flow equilibrium: infeasible, overloaded cells {:?}", ff.overloaded),
    }
    Ok(())
}

fn equilibrium_cmd(c: &Common) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let outcome = find_equilibrium_by_simulation(&l.net, &s.policy, &s.turning, &s.inflows, &search_options(s))?;
    println!("policy: {}", s.policy.name());
    println!("outcome: {}", describe(&outcome));
    if let EquilibriumOutcome::Bounded(r) = &outcome {
        write_equilibrium(&l.out, "equilibrium.csv", r)?;
        let lambda = s.inflows.at(0.0);
        let g = dual_graph(&l.net, &s.policy, &s.turning, &Controls::identity(l.net.len()), &r.rho, &lambda, 1.0)?;
        g.write_dot(create(&l.out, "dual_graph.dot")?)?;
        println!("rooted: {:?}", r.rooted);
        println!("converged after {:.1} min", r.time);
    }
    Ok(())
}

fn select_cmd(c: &Common, extraction: Option<&str>) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let extraction = match (extraction, &s.control) {
        (Some(e), _) => extraction_from(e)?,
        (None, ControlRequest::Equilibrium(e)) => *e,
        _ => Extraction::Turning,
    };
    let lambda = s.inflows.at(0.0);
    let sel = select_equilibrium(&l.net, &s.turning, &lambda, &l.objective, extraction, Backend::Auto)?;
    let v = verify_controlled_equilibrium(&l.net, &s.policy, &s.turning, &sel.controls, &sel.point.x, &lambda)?;
    let mut w = create(&l.out, "selected.csv")?;
    writeln!(w, "cell,x,outflow")?;
    for i in 0..l.net.len() {
        let out: f64 = sel.point.y[i].iter().sum();
        writeln!(w, "{i},{},{out}", sel.point.x[i])?;
    }
    w.flush()?;
    let schedule = ControlSchedule::constant(sel.controls.clone());
    write_control_csv(&l.net, &schedule, create(&l.out, "controls.csv")?)?;
    let controlled: f64 = sel.point.x.iter().sum();
    println!("objective value: {:.6}", sel.objective);
    println!("controlled total volume: {controlled:.3}");
    println!("verification residual: {:.3e} (passed {})", v.residual, v.passed);
    let outcome = find_equilibrium_by_simulation(&l.net, &s.policy, &s.turning, &s.inflows, &search_options(s))?;
    println!("uncontrolled: {}", describe(&outcome));
    if let EquilibriumOutcome::Bounded(r) = &outcome {
        write_equilibrium(&l.out, "uncontrolled.csv", r)?;
        println!("uncontrolled / controlled total: {:.3}", r.total_volume() / controlled);
    }
    Ok(())
}

fn mpc_cmd(c: &Common, window: Option<f64>, offramp: Option<&str>) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let (h, rule) = match &s.control {
        ControlRequest::Mpc { horizon, off_ramp } => (*horizon, *off_ramp),
        _ => (5.0, OffRampRule::default()),
    };
    let mut opts = MpcOptions::new(&l.net, window.unwrap_or(h), s.sim.dt(), s.sim.horizon);
    opts.off_ramp = off_ramp_from(offramp, rule)?;
    opts.objective = l.objective.clone();
    opts.policy = s.policy.clone();
    opts.incidents = s.incidents.iter().filter(|i| i.time > 0.0).cloned().collect();
    let rho0 = s.initial_volumes();
    let started = Instant::now();
    let out = mpc_loop(&l.net, &TurningSchedule::constant(s.turning.clone()), &s.inflows, &rho0, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();
    let unc = simulate(&s.network, &s.turning, &s.inflows, &s.sim_config(), &rho0)?;
    write_trajectory(&l.out, "", &out.trajectory)?;
    write_trajectory(&l.out, "uncontrolled_", &unc)?;
    write_control_csv(&l.net, &out.schedule, create(&l.out, "controls.csv")?)?;
    let unc_cost = volume_cost(&unc);
    println!("solves: {} (LP {} variables x {} rows)", out.solves, out.lp_size.0, out.lp_size.1);
    println!("controlled cost: {:.1}", out.cost);
    println!("uncontrolled cost: {unc_cost:.1}");
    println!("improvement: {:.2}%", 100.0 * (1.0 - out.cost / unc_cost));
    println!("runtime: {elapsed:.2} s");
    if let Some(reason) = out.aborted {
        return Err(format!("stopped early: {reason}").into());
    }
    Ok(())
}

fn periodic_cmd(c: &Common, period: Option<f64>, offramp: Option<&str>) -> Res<()> {
    let l = c.load()?;
    let s = &l.scenario;
    let (p, rule) = match &s.control {
        ControlRequest::Periodic { period, off_ramp } => (Some(*period), *off_ramp),
        _ => (None, OffRampRule::default()),
    };
    let period = period.or(p).ok_or("periodic needs --period or a periodic control request")?;
    let sel = periodic_selection(
        &l.net,
        &TurningSchedule::constant(s.turning.clone()),
        &s.inflows,
        period,
        s.sim.dt(),
        &l.objective,
        off_ramp_from(offramp, rule)?,
        &s.policy,
        Backend::Auto,
    )?;
    write_trajectory(&l.out, "", &sel.simulated)?;
    write_control_csv(&l.net, &sel.schedule, create(&l.out, "controls.csv")?)?;
    println!("objective value: {:.6}", sel.solution.objective);
    println!("wrap residual: {:.3e}", sel.wrap);
    println!("two-period residual: {:.3e}", sel.periodicity);
    Ok(())
}

/// Worker count from `TRAFFICNET_THREADS`, when set.
fn thread_cap() -> Res<Option<usize>> {
    match std::env::var("TRAFFICNET_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| format!("TRAFFICNET_THREADS: not a count: `{v}`"))?;
            Ok(Some(n.max(1)))
        }
        Err(_) => Ok(None),
    }
}

fn compare_cmd(c: &Common) -> Res<()> {
    if c.theta.is_empty() {
        return Err("compare-policies needs --theta, e.g. --theta 0,0.8,1".into());
    }
    let l = c.load()?;
    let s = &l.scenario;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    let rho0 = s.initial_volumes();
    type Run = Result<(Trajectory, EquilibriumOutcome), String>;
    let runs: Vec<Run> = pool.install(|| {
        c.theta
            .par_iter()
            .map(|&theta| {
                let policy = Policy::from_theta(theta);
                let mut config = s.sim_config();
                config.policy = policy.clone();
                let traj = simulate(&s.network, &s.turning, &s.inflows, &config, &rho0).map_err(|e| e.to_string())?;
                let eq = find_equilibrium_by_simulation(&l.net, &policy, &s.turning, &s.inflows, &search_options(s))
                    .map_err(|e| e.to_string())?;
                Ok((traj, eq))
            })
            .collect()
    });
    let mut columns = Vec::new();
    let mut header = Vec::new();
    let mut times = Vec::new();
    for (theta, run) in c.theta.iter().zip(runs) {
        let (traj, eq) = run.map_err(|e| format!("theta {theta}: {e}"))?;
        println!("theta {theta}: final total {:.3}; equilibrium {}", traj.total_volume().last().unwrap_or(&0.0), describe(&eq));
        header.push(format!("theta_{theta}"));
        columns.push(traj.total_volume());
        if times.len() < traj.times.len() {
            times = traj.times.clone();
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_series(&l.out, "total_volume.csv", &header, &times, &columns)
}

fn benchmark_cmd(name: &str, output: &Path) -> Res<()> {
    let s = Scenario::builtin(name).map_err(|e| format!("{e} (known: {})", BUILTINS.join(", ")))?;
    s.save(output)?;
    println!("wrote {} ({} cells)", output.display(), s.network.len());
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Validate(c) => validate_cmd(&c),
        Command::Simulate(c) => simulate_cmd(&c),
        Command::Analyze(c) => analyze_cmd(&c),
        Command::Equilibrium(c) => equilibrium_cmd(&c),
        Command::Select { common, extraction } => select_cmd(&common, extraction.as_deref()),
        Command::Mpc { common, window, offramp } => mpc_cmd(&common, window, offramp.as_deref()),
        Command::Periodic { common, period, offramp } => periodic_cmd(&common, period, offramp.as_deref()),
        Command::ComparePolicies(c) => compare_cmd(&c),
        Command::Benchmark { name, output } => benchmark_cmd(&name, &output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
