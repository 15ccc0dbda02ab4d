//! Batch experiment runner: configuration, the build-design-simulate-estimate
//! pipeline, Monte Carlo aggregation and report emission.

pub mod io;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::kalman_tracking::{fim_prior_term, kf_init, kf_step, sensor_information, solve_dare, ss_kf_run, DareOptions};
use crate::numerics::{self, Matrix, Vector};
use crate::observability::{mse_deterministic, mse_lower_bound_random, observability_gram, LsObserver, SamplingSchedule, GRAM_RTOL};
use crate::parallel::{map_indexed, trial_rng, Execution};
use crate::process_models::{
    arma1_model, diffusion_model, simulate, transition_products_from_zero, wave_initial_state, wave_model, BandlimitedModel, NoiseSpec,
    SimulationOptions, Trajectory,
};
use crate::sampling_design::{
    design_deterministic, design_kf_step, design_random_rates, greedy_steady_state, DesignResult, GreedyResult, KfDesignMode,
};
use crate::spectral_graph::{
    band_selector, build_knn_graph, grid_graph, random_geometric_graph, select_frequencies, FrequencyPolicy, FrequencySet, Graph,
    ShiftKind, SpectralBasis, VertexSet, Weighting,
};
use metrics::Level;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSource {
    Grid { rows: usize, cols: usize },
    EdgesCsv { path: PathBuf },
    CoordsCsv {
        path: PathBuf,
        k: usize,
        /// Gaussian kernel width; binary weights when absent.
        #[serde(default)]
        sigma: Option<f64>,
    },
    RandomGeometric { nodes: usize, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessConfig {
    Diffusion { rate: f64 },
    Wave { speed: f64 },
    Arma { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BandConfig {
    Lowest { count: usize },
    /// Energy fraction of the initial state (or of the signals file).
    EnergyFraction { fraction: f64 },
    Explicit { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    /// Indicator of the first grid column.
    GridLeftColumn,
    Constant { value: f64 },
    Explicit { values: Vec<f64> },
    /// Row `row` of a signals file; the whole file is the band reference.
    SignalsCsv {
        path: PathBuf,
        #[serde(default)]
        row: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub measurement_var: f64,
    /// `Σ_w̃ = scale · I`.
    pub process_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Least-squares recovery of the initial state over the horizon.
    Observe,
    /// Time-varying Kalman filter.
    Kf,
    /// Steady-state Kalman filter on a constant sampling set.
    SsKf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DesignConfig {
    Deterministic { gamma: f64 },
    RandomRates { gamma: f64, c_min: f64, c_max: f64 },
    KfStep {
        gamma: f64,
        #[serde(default)]
        relaxed: bool,
    },
    GreedySteadyState { budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScheduleConfig {
    /// One set per step, or a single set held over the horizon.
    Explicit { sets: Vec<VertexSet> },
    RandomRates { rates: Vec<f64> },
    /// A uniformly random set of `size` nodes per trial, held over time.
    RandomUniform { size: usize },
    Designed { design: DesignConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterInit {
    /// Every entry of the initial estimate.
    pub state_guess: f64,
    /// `P_0 = scale · I`; `Σ_w̃` when absent.
    #[serde(default)]
    pub cov_scale: Option<f64>,
}

impl Default for FilterInit {
    fn default() -> Self {
        Self {
            state_guess: 1.0,
            cov_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub graph: GraphSource,
    pub shift: ShiftKind,
    pub process: ProcessConfig,
    pub band: BandConfig,
    pub initial_state: InitialState,
    pub noise: NoiseConfig,
    pub horizon: usize,
    pub task: Task,
    pub schedule: ScheduleConfig,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub filter: FilterInit,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentConfig {
    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.graph {
            GraphSource::EdgesCsv { path } | GraphSource::CoordsCsv { path, .. } => fix(path),
            _ => {}
        }
        if let InitialState::SignalsCsv { path, .. } = &mut self.initial_state {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        for path in self.referenced_files() {
            if !path.exists() {
                return Err(Error::InvalidParameter(format!("missing file {}", path.display())));
            }
        }
        Ok(())
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        match &self.graph {
            GraphSource::EdgesCsv { path } | GraphSource::CoordsCsv { path, .. } => out.push(path.as_path()),
            _ => {}
        }
        if let InitialState::SignalsCsv { path, .. } = &self.initial_state {
            out.push(path.as_path());
        }
        out
    }
}

/// Everything built from the config before any schedule or trial.
#[derive(Debug, Clone)]
pub struct Setup {
    pub graph: Graph,
    pub basis: SpectralBasis,
    pub freqs: FrequencySet,
    pub model: BandlimitedModel,
    /// Initial node signal.
    pub x0_vertex: Vector,
    /// Initial model state.
    pub x0: Vector,
}

pub fn build_graph(source: &GraphSource, seed: u64) -> Result<Graph> {
    match source {
        GraphSource::Grid { rows, cols } => grid_graph(*rows, *cols),
        GraphSource::EdgesCsv { path } => io::load_edges_csv(path),
        GraphSource::CoordsCsv { path, k, sigma } => {
            let coords = io::load_coords_csv(path)?;
            let weighting = sigma.map_or(Weighting::Binary, |sigma| Weighting::Gaussian { sigma });
            build_knn_graph(&coords, *k, weighting)
        }
        GraphSource::RandomGeometric { nodes, radius } => {
            // the graph stream is separate from the trial streams
            let mut rng = trial_rng(seed, u64::MAX);
            random_geometric_graph(*nodes, *radius, &mut rng).map(|(g, _)| g)
        }
    }
}

impl Setup {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let graph = build_graph(&config.graph, config.seed).stage("graph")?;
        let n = graph.node_count();
        let basis = SpectralBasis::of_graph(&graph, config.shift).stage("basis")?;

        let (x0_vertex, reference) = initial_state(config, n).stage("initial state")?;
        let policy = match &config.band {
            BandConfig::Lowest { count } => Some(FrequencyPolicy::Lowest(*count)),
            BandConfig::EnergyFraction { fraction } => Some(FrequencyPolicy::EnergyFraction(*fraction)),
            BandConfig::Explicit { .. } => None,
        };
        let freqs = match (&config.band, policy) {
            (BandConfig::Explicit { indices }, _) => FrequencySet::new(indices.clone(), n),
            (_, Some(p)) => select_frequencies(&basis, Some(&reference), p),
            _ => unreachable!(),
        }
        .stage("band")?;

        let noise = NoiseSpec::isotropic(freqs.len(), config.noise.process_scale, config.noise.measurement_var);
        let model = match config.process {
            ProcessConfig::Diffusion { rate } => diffusion_model(&basis, rate, &freqs, noise),
            ProcessConfig::Wave { speed } => wave_model(&basis, speed, &freqs, noise),
            ProcessConfig::Arma { rate } => arma1_model(&basis, rate, &freqs, noise),
        }
        .stage("model")?;
        let spectral = band_selector(&basis, &freqs)?.transpose() * &x0_vertex;
        let x0 = match config.process {
            ProcessConfig::Wave { .. } => wave_initial_state(&spectral),
            _ => spectral,
        };
        Ok(Setup {
            graph,
            basis,
            freqs,
            model,
            x0_vertex,
            x0,
        })
    }

    fn filter_prior(&self, init: FilterInit) -> (Vector, Matrix) {
        let d = self.model.state_dim();
        let p0 = match init.cov_scale {
            Some(s) => Matrix::identity(d, d) * s,
            None => self.model.process_cov().clone(),
        };
        (Vector::from_element(d, init.state_guess), p0)
    }
}

fn initial_state(config: &ExperimentConfig, n: usize) -> Result<(Vector, Matrix)> {
    let x0 = match &config.initial_state {
        InitialState::GridLeftColumn => {
            let GraphSource::Grid { rows, cols } = config.graph else {
                return Err(Error::InvalidParameter("grid_left_column needs a grid graph".into()));
            };
            let mut x = Vector::zeros(n);
            for r in 0..rows {
                x[r * cols] = 1.0;
            }
            x
        }
        InitialState::Constant { value } => Vector::from_element(n, *value),
        InitialState::Explicit { values } => {
            if values.len() != n {
                return Err(Error::dims(format!("initial state has {} values for {n} nodes", values.len())));
            }
            Vector::from_column_slice(values)
        }
        InitialState::SignalsCsv { path, row } => {
            let signals = io::load_signals_csv(path)?;
            if signals.ncols() != n {
                return Err(Error::InconsistentNodeCount(format!("signals have {} columns, graph has {n} nodes", signals.ncols())));
            }
            if *row >= signals.nrows() {
                return Err(Error::IndexOutOfRange { index: *row, size: signals.nrows() });
            }
            let x = signals.row(*row).transpose();
            return Ok((x, signals));
        }
    };
    let reference = Matrix::from_row_slice(1, n, x0.as_slice());
    Ok((x0, reference))
}

/// How each trial obtains its sampling sets.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedulePlan {
    Fixed(Vec<VertexSet>),
    Bernoulli(Vec<f64>),
    UniformSize(usize),
}

impl SchedulePlan {
    pub fn realize(&self, horizon: usize, n: usize, rng: &mut impl rand::Rng) -> Result<Vec<VertexSet>> {
        match self {
            SchedulePlan::Fixed(sets) => Ok(sets.clone()),
            SchedulePlan::Bernoulli(rates) => SamplingSchedule::bernoulli(rates.clone())?.realize(horizon, n, rng),
            SchedulePlan::UniformSize(size) => {
                if *size > n {
                    return Err(Error::InvalidParameter(format!("cannot pick {size} of {n} nodes")));
                }
                let set = VertexSet::new(sample(rng, n, *size).into_vec(), n)?;
                Ok(vec![set; horizon + 1])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignRecord {
    Relaxation(DesignResult),
    KfSteps { steps: Vec<DesignResult> },
    Greedy(GreedyResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sets: Option<Vec<VertexSet>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignRecord>,
}

fn fixed_sets(sets: &[VertexSet], horizon: usize) -> Result<Vec<VertexSet>> {
    match sets.len() {
        1 => Ok(vec![sets[0].clone(); horizon + 1]),
        l if l == horizon + 1 => Ok(sets.to_vec()),
        l => Err(Error::BadSchedule(format!("{l} sets for horizon {horizon}"))),
    }
}

/// Turns the schedule source into a plan, running the design if requested.
pub fn resolve_schedule(setup: &Setup, config: &ExperimentConfig) -> Result<(SchedulePlan, ScheduleReport)> {
    let m = &setup.model;
    let horizon = config.horizon;
    let var = config.noise.measurement_var;
    let mut report = ScheduleReport {
        sets: None,
        rates: None,
        uniform_size: None,
        design: None,
    };
    let plan = match &config.schedule {
        ScheduleConfig::Explicit { sets } => SchedulePlan::Fixed(fixed_sets(sets, horizon)?),
        ScheduleConfig::RandomRates { rates } => SchedulePlan::Bernoulli(rates.clone()),
        ScheduleConfig::RandomUniform { size } => SchedulePlan::UniformSize(*size),
        ScheduleConfig::Designed { design } => match design {
            DesignConfig::Deterministic { gamma } => {
                let r = design_deterministic(m, horizon, var, *gamma)?;
                let sets = r.schedule.clone().expect("deterministic designs carry a schedule");
                report.design = Some(DesignRecord::Relaxation(r));
                SchedulePlan::Fixed(sets)
            }
            DesignConfig::RandomRates { gamma, c_min, c_max } => {
                let r = design_random_rates(m, horizon, var, *gamma, *c_min, *c_max)?;
                let rates = r.rounded.clone();
                report.design = Some(DesignRecord::Relaxation(r));
                SchedulePlan::Bernoulli(rates)
            }
            DesignConfig::KfStep { gamma, relaxed } => {
                let mode = if *relaxed { KfDesignMode::Relaxed } else { KfDesignMode::Greedy };
                let (steps, sets) = kf_step_schedule(setup, config.filter, horizon, *gamma, mode)?;
                report.design = Some(DesignRecord::KfSteps { steps });
                SchedulePlan::Fixed(sets)
            }
            DesignConfig::GreedySteadyState { budget } => {
                let r = greedy_steady_state(m, *budget, DareOptions::default(), config.execution)?;
                let sets = vec![r.set.clone(); horizon + 1];
                report.design = Some(DesignRecord::Greedy(r));
                SchedulePlan::Fixed(sets)
            }
        },
    };
    match &plan {
        SchedulePlan::Fixed(sets) => report.sets = Some(sets.clone()),
        SchedulePlan::Bernoulli(rates) => report.rates = Some(rates.clone()),
        SchedulePlan::UniformSize(size) => report.uniform_size = Some(*size),
    }
    Ok((plan, report))
}

/// Per-step FIM designs along the information recursion; `S_0` is empty.
pub fn kf_step_schedule(
    setup: &Setup,
    init: FilterInit,
    horizon: usize,
    gamma: f64,
    mode: KfDesignMode,
) -> Result<(Vec<DesignResult>, Vec<VertexSet>)> {
    let m = &setup.model;
    let (_, p0) = setup.filter_prior(init);
    let mut fim = numerics::spd_inverse_or_pinv(&p0)?;
    let mut steps = Vec::with_capacity(horizon);
    let mut sets = vec![VertexSet::empty()];
    for t in 1..=horizon {
        let prior = fim_prior_term(&fim, m, t - 1)?;
        let r = design_kf_step(&prior, m, gamma, mode)?;
        let set = r.schedule.as_ref().expect("kf designs carry a set")[0].clone();
        fim = prior + sensor_information(m, &set);
        sets.push(set);
        steps.push(r);
    }
    Ok((steps, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: usize,
    pub nmse: Level,
    /// Mean trace of the error covariance of the estimate.
    pub tr_p_post: f64,
    /// Mean number of samples taken at this step.
    pub samples: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Theoretical {
    /// Least-squares MSE of the initial state for a fixed schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state_mse: Option<Level>,
    /// Lower bound on that MSE under Bernoulli sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state_mse_bound: Option<Level>,
    /// Prior `tr(P_∞)` of the steady-state filter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steady_state_trace: Option<Level>,
    /// Posterior steady-state trace.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steady_state_posterior_trace: Option<Level>,
    /// `tr(P_T⁺)` of the time-varying filter on a fixed schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_trace: Option<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub node_count: usize,
    pub bandwidth: usize,
    pub frequencies: Vec<usize>,
    pub schedule: ScheduleReport,
    pub steps: Vec<StepReport>,
    /// Pooled NMSE over every reported step and trial.
    pub nmse: Level,
    /// Variance of the per-trial NMSE.
    pub nmse_variance: f64,
    /// Mean squared error of the estimated initial state (observe task).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_initial_mse: Option<Level>,
    pub theoretical: Theoretical,
    pub trials: usize,
    /// Trials whose schedule made the estimate impossible.
    pub failed_trials: usize,
    /// Kept out of `report.json` so that reports are reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

struct TrialOutcome {
    err: Vec<f64>,
    energy: Vec<f64>,
    trace: Vec<f64>,
    samples: Vec<usize>,
    initial_sq_err: Option<f64>,
}

fn observe_trial(setup: &Setup, traj: &Trajectory, horizon: usize) -> Result<TrialOutcome> {
    let m = &setup.model;
    let observer = LsObserver::new(m, &traj.schedule, horizon, GRAM_RTOL)?;
    let x0_hat = observer.recover(m, &traj.measurements, &[])?;
    let gram = observability_gram(m, &traj.schedule, horizon)?;
    let cov0 = numerics::spd_inverse(&gram).ok_or(Error::NotObservable {
        rank: 0,
        bandwidth: m.state_dim(),
    })? * m.measurement_var();
    let products = transition_products_from_zero(m, horizon);
    let mut out = TrialOutcome {
        err: Vec::new(),
        energy: Vec::new(),
        trace: Vec::new(),
        samples: Vec::new(),
        initial_sq_err: Some((&x0_hat - &traj.spectral_states[0]).norm_squared()),
    };
    for (t, a) in products.iter().enumerate() {
        let est = m.output() * (a * &x0_hat);
        out.err.push((est - &traj.states[t]).norm_squared());
        out.energy.push(traj.states[t].norm_squared());
        out.trace.push((a * &cov0 * a.transpose()).trace());
        out.samples.push(traj.schedule[t].len());
    }
    Ok(out)
}

fn kf_trial(setup: &Setup, traj: &Trajectory, init: FilterInit) -> Result<TrialOutcome> {
    let m = &setup.model;
    let (x0, p0) = setup.filter_prior(init);
    let mut st = kf_init(&x0, &p0, m.node_count())?;
    let mut out = TrialOutcome {
        err: Vec::new(),
        energy: Vec::new(),
        trace: Vec::new(),
        samples: Vec::new(),
        initial_sq_err: None,
    };
    for t in 1..traj.measurements.len() {
        st = kf_step(&st, m, None, &traj.measurements[t], &traj.schedule[t])?;
        out.err.push((m.output() * &st.x_post - &traj.states[t]).norm_squared());
        out.energy.push(traj.states[t].norm_squared());
        out.trace.push(st.p_post.trace());
        out.samples.push(traj.schedule[t].len());
    }
    Ok(out)
}

fn ss_kf_trial(setup: &Setup, traj: &Trajectory, init: FilterInit) -> Result<TrialOutcome> {
    let m = &setup.model;
    let set = &traj.schedule[0];
    if traj.schedule.iter().any(|s| s != set) {
        return Err(Error::InvalidParameter("steady-state filtering needs a constant sampling set".into()));
    }
    let steady = solve_dare(m, set, DareOptions::default())?;
    let post_trace = steady.posterior_cov(m).trace();
    let (x0, _) = setup.filter_prior(init);
    let estimates = ss_kf_run(m, &steady, set, &x0, &traj.measurements[1..])?;
    let mut out = TrialOutcome {
        err: Vec::new(),
        energy: Vec::new(),
        trace: Vec::new(),
        samples: Vec::new(),
        initial_sq_err: None,
    };
    for (k, est) in estimates.iter().enumerate() {
        let t = k + 1;
        out.err.push((m.output() * est - &traj.states[t]).norm_squared());
        out.energy.push(traj.states[t].norm_squared());
        out.trace.push(post_trace);
        out.samples.push(set.len());
    }
    Ok(out)
}

fn theoretical(setup: &Setup, config: &ExperimentConfig, plan: &SchedulePlan) -> Result<Theoretical> {
    let m = &setup.model;
    let horizon = config.horizon;
    let var = config.noise.measurement_var;
    let mut th = Theoretical::default();
    match (config.task, plan) {
        (Task::Observe, SchedulePlan::Fixed(sets)) => {
            th.initial_state_mse = mse_deterministic(m, sets, horizon, var).ok().map(Level::new);
        }
        (Task::Observe, SchedulePlan::Bernoulli(rates)) => {
            th.initial_state_mse_bound = mse_lower_bound_random(m, rates, horizon, var).ok().map(Level::new);
        }
        (Task::Kf, SchedulePlan::Fixed(sets)) => {
            let (x0, p0) = setup.filter_prior(config.filter);
            let mut st = kf_init(&x0, &p0, m.node_count())?;
            let zero = Vector::zeros(m.node_count());
            for set in &sets[1..] {
                st = kf_step(&st, m, None, &zero, set)?;
            }
            th.final_trace = Some(Level::new(st.p_post.trace()));
        }
        (Task::SsKf, SchedulePlan::Fixed(sets)) if m.is_time_invariant() => {
            if let Ok(ss) = solve_dare(m, &sets[0], DareOptions::default()) {
                th.steady_state_trace = Some(Level::new(ss.p_inf.trace()));
                th.steady_state_posterior_trace = Some(Level::new(ss.posterior_cov(m).trace()));
            }
        }
        _ => {}
    }
    Ok(th)
}

/// Runs the configured scenario end to end.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    config.validate().stage("config")?;
    let setup = Setup::build(config)?;
    let (plan, schedule) = resolve_schedule(&setup, config).stage("schedule")?;
    let theoretical = theoretical(&setup, config, &plan).stage("theory")?;
    let m = &setup.model;
    let horizon = config.horizon;
    let options = if config.noise.process_scale > 0.0 {
        SimulationOptions::default()
    } else {
        SimulationOptions {
            process_noise: false,
            measurement_noise: true,
        }
    };

    let outcomes = map_indexed(config.execution, config.trials, |trial| -> Result<Option<TrialOutcome>> {
        let mut rng = trial_rng(config.seed, trial as u64);
        let sets = plan.realize(horizon, m.node_count(), &mut rng)?;
        let traj = simulate(m, &setup.x0, &[], horizon, &sets, options, &mut rng)?;
        let outcome = match config.task {
            Task::Observe => observe_trial(&setup, &traj, horizon),
            Task::Kf => kf_trial(&setup, &traj, config.filter),
            Task::SsKf => ss_kf_trial(&setup, &traj, config.filter),
        };
        match outcome {
            Ok(o) => Ok(Some(o)),
            // random schedules may leave a trial unobservable or undetectable
            Err(Error::NotObservable { .. } | Error::Divergent { .. } | Error::NotConverged { .. })
                if !matches!(plan, SchedulePlan::Fixed(_)) =>
            {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });

    let mut done = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        if let Some(o) = o.stage("trials")? {
            done.push(o);
        }
    }
    let failed_trials = config.trials - done.len();
    if done.is_empty() {
        return Err(Error::Infeasible("every trial failed".into()).at_stage("trials"));
    }
    let steps_len = done[0].err.len();
    let first_t = if config.task == Task::Observe { 0 } else { 1 };
    let count = done.len() as f64;
    let mut steps = Vec::with_capacity(steps_len);
    for k in 0..steps_len {
        let err: f64 = done.iter().map(|o| o.err[k]).sum();
        let energy: f64 = done.iter().map(|o| o.energy[k]).sum();
        steps.push(StepReport {
            t: first_t + k,
            nmse: Level::new(if energy > 0.0 { err / energy } else { f64::NAN }),
            tr_p_post: done.iter().map(|o| o.trace[k]).sum::<f64>() / count,
            samples: done.iter().map(|o| o.samples[k] as f64).sum::<f64>() / count,
        });
    }
    let total_err: f64 = done.iter().flat_map(|o| &o.err).sum();
    let total_energy: f64 = done.iter().flat_map(|o| &o.energy).sum();
    if total_energy == 0.0 {
        return Err(Error::ZeroReference.at_stage("metrics"));
    }
    let per_trial: Vec<f64> = done
        .iter()
        .map(|o| o.err.iter().sum::<f64>() / o.energy.iter().sum::<f64>())
        .collect();
    let mean = per_trial.iter().sum::<f64>() / count;
    let nmse_variance = per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let empirical_initial_mse = if config.task == Task::Observe {
        Some(Level::new(done.iter().filter_map(|o| o.initial_sq_err).sum::<f64>() / count))
    } else {
        None
    };

    Ok(RunReport {
        config: config.clone(),
        node_count: m.node_count(),
        bandwidth: setup.freqs.len(),
        frequencies: setup.freqs.indices().to_vec(),
        schedule,
        steps,
        nmse: Level::new(total_err / total_energy),
        nmse_variance,
        empirical_initial_mse,
        theoretical,
        trials: config.trials,
        failed_trials,
        wall_clock: started.elapsed(),
    })
}

/// Writes `report.json`, `trace.csv` and `schedule.json` into `dir`.
pub fn write_outputs(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(&report.schedule)?)?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv")).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["t", "nmse_db", "tr_p_post", "samples"]).map_err(|e| Error::Io(e.into()))?;
    for s in &report.steps {
        w.write_record([s.t.to_string(), format!("{:?}", s.nmse.db), format!("{:?}", s.tr_p_post), format!("{:?}", s.samples)])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_config() -> ExperimentConfig {
        ExperimentConfig {
            graph: GraphSource::Grid { rows: 3, cols: 5 },
            shift: ShiftKind::Laplacian,
            process: ProcessConfig::Diffusion { rate: 0.5 },
            band: BandConfig::Lowest { count: 3 },
            initial_state: InitialState::GridLeftColumn,
            noise: NoiseConfig {
                measurement_var: 0.1,
                process_scale: 1e-4,
            },
            horizon: 10,
            task: Task::Kf,
            schedule: ScheduleConfig::Explicit {
                sets: vec![VertexSet::new(vec![0, 4, 7, 10, 14], 15).unwrap()],
            },
            trials: 8,
            seed: 3,
            filter: FilterInit::default(),
            execution: Execution::Parallel,
        }
    }

    #[test]
    fn left_column_state() {
        let s = Setup::build(&grid_config()).unwrap();
        let ones: Vec<usize> = (0..15).filter(|&i| s.x0_vertex[i] == 1.0).collect();
        assert_eq!(ones, vec![0, 5, 10]);
    }

    #[test]
    fn noiseless_full_sampling_recovers() {
        let mut c = grid_config();
        c.task = Task::Observe;
        c.trials = 1;
        c.horizon = 3;
        c.noise = NoiseConfig {
            measurement_var: 1e-12,
            process_scale: 0.0,
        };
        c.band = BandConfig::EnergyFraction { fraction: 0.99 };
        c.schedule = ScheduleConfig::Explicit { sets: vec![VertexSet::all(15)] };
        let r = run(&c).unwrap();
        assert!(r.nmse.db <= -80.0, "{}", r.nmse.db);
    }

    #[test]
    fn same_seed_same_bytes_across_execution_modes() {
        let c = grid_config();
        let a = serde_json::to_string(&run(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut seq = c.clone();
        seq.execution = Execution::Sequential;
        let r = run(&seq).unwrap();
        let p = run(&c).unwrap();
        assert_eq!(r.steps, p.steps);
        assert_eq!(r.nmse, p.nmse);
    }

    #[test]
    fn stage_tags_on_errors() {
        let mut c = grid_config();
        c.band = BandConfig::Explicit { indices: vec![99] };
        match run(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "band"),
            other => panic!("unexpected {other:?}"),
        }
        c.trials = 0;
        assert!(matches!(run(&c), Err(Error::Stage { stage: "config", .. })));
    }

    #[test]
    fn config_json_round_trip() {
        let c = grid_config();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = grid_config();
        c.task = Task::SsKf;
        let r = run(&c).unwrap();
        assert!(r.theoretical.steady_state_trace.is_some());
        write_outputs(&r, dir.path()).unwrap();
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace.starts_with("t,nmse_db,tr_p_post,samples\n"));
        assert_eq!(trace.lines().count(), 11);
        assert!(dir.path().join("schedule.json").exists());
    }
}
