use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use graph_track::experiment::{self, io, kf_step_schedule, run, write_outputs, ExperimentConfig, RunReport, Setup, Task};
use graph_track::numerics::Matrix;
use graph_track::observability::SamplingSchedule;
use graph_track::parallel::trial_rng;
use graph_track::process_models::{simulate, SimulationOptions};
use graph_track::kalman_tracking::DareOptions;
use graph_track::sampling_design::{design_deterministic, design_random_rates, greedy_steady_state, KfDesignMode};
use graph_track::{Error, Result};

#[derive(Parser)]
#[command(name = "graph-track", version, about = "Sampling design and tracking of bandlimited graph processes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured number of trials.
    #[arg(long, global = true)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Graph construction.
    Graph {
        #[command(subcommand)]
        action: GraphAction,
    },
    /// Sampling design.
    Design {
        #[command(subcommand)]
        mode: DesignMode,
    },
    /// Least-squares recovery of the initial state.
    Observe,
    /// Kalman tracking.
    Track {
        #[command(subcommand)]
        filter: TrackMode,
    },
    /// Simulates one trajectory and writes its signals.
    Simulate,
    /// Prints a summary of a written report.
    Report {
        /// Report file; defaults to `<out>/report.json`.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GraphAction {
    /// Builds the configured graph; writes `edges.csv` and `spectrum.json`.
    Build,
}

#[derive(Subcommand)]
enum DesignMode {
    /// Sparsest deterministic schedule meeting an MSE target.
    Det {
        #[arg(long)]
        gamma: f64,
    },
    /// Smallest sampling rates meeting an MSE bound.
    Random {
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        c_min: f64,
        #[arg(long, default_value_t = 1.0)]
        c_max: f64,
    },
    /// Per-step sets keeping the FIM above a floor.
    KfStep {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        relaxed: bool,
    },
    /// Greedy steady-state set of a fixed size.
    GreedySs {
        #[arg(long)]
        budget: usize,
    },
}

#[derive(Subcommand)]
enum TrackMode {
    Kf,
    SsKf,
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("--config is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(trials) = global.trials {
        config.trials = trials;
    }
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn summarize(report: &RunReport) {
    println!("nodes {}  bandwidth {}  trials {} ({} failed)", report.node_count, report.bandwidth, report.trials, report.failed_trials);
    println!("NMSE {:.4} dB ({:.6e})", report.nmse.db, report.nmse.linear);
    let th = &report.theoretical;
    for (name, level) in [
        ("initial-state MSE", th.initial_state_mse),
        ("initial-state MSE bound", th.initial_state_mse_bound),
        ("steady-state tr(P)", th.steady_state_trace),
        ("final tr(P)", th.final_trace),
    ] {
        if let Some(l) = level {
            println!("{name}: {:.6e} ({:.4} dB)", l.linear, l.db);
        }
    }
    if let Some(l) = report.empirical_initial_mse {
        println!("empirical initial-state MSE: {:.6e} ({:.4} dB)", l.linear, l.db);
    }
}

fn run_task(global: &Global, task: Task) -> Result<()> {
    let mut config = load_config(global)?;
    config.task = task;
    let report = run(&config)?;
    write_outputs(&report, &global.out)?;
    summarize(&report);
    log::info!("finished in {:.3} s", report.wall_clock.as_secs_f64());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::Graph { action: GraphAction::Build } => {
            let config = load_config(global)?;
            let setup = Setup::build(&config)?;
            fs::create_dir_all(&global.out)?;
            io::write_edges_csv(&setup.graph, global.out.join("edges.csv"))?;
            #[derive(Serialize)]
            struct Spectrum<'a> {
                node_count: usize,
                edge_count: usize,
                eigenvalues: &'a [f64],
                frequencies: &'a [usize],
            }
            write_json(
                &global.out.join("spectrum.json"),
                &Spectrum {
                    node_count: setup.graph.node_count(),
                    edge_count: setup.graph.edges().len(),
                    eigenvalues: setup.basis.lambda.as_slice(),
                    frequencies: setup.freqs.indices(),
                },
            )?;
            println!("{} nodes, {} edges, bandwidth {}", setup.graph.node_count(), setup.graph.edges().len(), setup.freqs.len());
        }
        Command::Design { mode } => {
            let config = load_config(global)?;
            let setup = Setup::build(&config)?;
            let m = &setup.model;
            let horizon = config.horizon;
            let var = config.noise.measurement_var;
            let out = &global.out;
            match mode {
                DesignMode::Det { gamma } => {
                    let r = design_deterministic(m, horizon, var, gamma)?;
                    println!("feasible {}  samples {}  MSE {:.6e} (target {gamma:.6e})", r.feasible, r.selected_count(), r.achieved_constraint);
                    write_json(&out.join("schedule.json"), &SamplingSchedule::deterministic(r.schedule.clone().unwrap_or_default()))?;
                    write_json(&out.join("design.json"), &r)?;
                }
                DesignMode::Random { gamma, c_min, c_max } => {
                    let r = design_random_rates(m, horizon, var, gamma, c_min, c_max)?;
                    println!("feasible {}  total rate {:.4}  bound {:.6e}", r.feasible, r.rounded.iter().sum::<f64>(), r.achieved_constraint);
                    write_json(&out.join("schedule.json"), &SamplingSchedule::bernoulli(r.rounded.clone())?)?;
                    write_json(&out.join("design.json"), &r)?;
                }
                DesignMode::KfStep { gamma, relaxed } => {
                    let mode = if relaxed { KfDesignMode::Relaxed } else { KfDesignMode::Greedy };
                    let (steps, sets) = kf_step_schedule(&setup, config.filter, horizon, gamma, mode)?;
                    let total: usize = sets.iter().map(|s| s.len()).sum();
                    println!("{} steps, {total} samples", steps.len());
                    write_json(&out.join("schedule.json"), &SamplingSchedule::deterministic(sets))?;
                    write_json(&out.join("design.json"), &steps)?;
                }
                DesignMode::GreedySs { budget } => {
                    let r = greedy_steady_state(m, budget, DareOptions::default(), config.execution)?;
                    println!("set {:?}  tr(P) {:.6e}", r.set.indices(), r.traces.last().copied().unwrap_or(f64::NAN));
                    write_json(&out.join("schedule.json"), &SamplingSchedule::constant(r.set.clone(), horizon))?;
                    write_json(&out.join("design.json"), &r)?;
                }
            }
        }
        Command::Observe => run_task(global, Task::Observe)?,
        Command::Track { filter } => run_task(global, if matches!(filter, TrackMode::Kf) { Task::Kf } else { Task::SsKf })?,
        Command::Simulate => {
            let config = load_config(global)?;
            let setup = Setup::build(&config)?;
            let (plan, schedule) = experiment::resolve_schedule(&setup, &config)?;
            let mut rng = trial_rng(config.seed, 0);
            let sets = plan.realize(config.horizon, setup.model.node_count(), &mut rng)?;
            let traj = simulate(&setup.model, &setup.x0, &[], config.horizon, &sets, SimulationOptions::default(), &mut rng)?;
            let n = setup.model.node_count();
            let stack = |rows: &[graph_track::Vector]| Matrix::from_fn(rows.len(), n, |t, i| rows[t][i]);
            fs::create_dir_all(&global.out)?;
            io::write_signals_csv(&stack(&traj.states), global.out.join("states.csv"))?;
            io::write_signals_csv(&stack(&traj.measurements), global.out.join("measurements.csv"))?;
            write_json(&global.out.join("schedule.json"), &schedule)?;
            println!("{} steps on {n} nodes", traj.states.len());
        }
        Command::Report { path } => {
            let path = path.unwrap_or_else(|| global.out.join("report.json"));
            let report: RunReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
            summarize(&report);
            println!("{:>5} {:>12} {:>14} {:>8}", "t", "nmse_db", "tr_p_post", "samples");
            for s in &report.steps {
                println!("{:>5} {:>12.4} {:>14.6e} {:>8.2}", s.t, s.nmse.db, s.tr_p_post, s.samples);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
