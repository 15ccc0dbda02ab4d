use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use graph_track::experiment::{
    run, BandConfig, DesignConfig, ExperimentConfig, FilterInit, GraphSource, InitialState, NoiseConfig, ProcessConfig, ScheduleConfig, Setup,
    Task,
};
use graph_track::kalman_tracking::DareOptions;
use graph_track::parallel::Execution;
use graph_track::sampling_design::greedy_steady_state;
use graph_track::spectral_graph::ShiftKind;

fn grid(execution: Execution, task: Task, schedule: ScheduleConfig) -> ExperimentConfig {
    ExperimentConfig {
        graph: GraphSource::Grid { rows: 5, cols: 15 },
        shift: ShiftKind::Laplacian,
        process: ProcessConfig::Diffusion { rate: 1.0 },
        band: BandConfig::Lowest { count: 10 },
        initial_state: InitialState::GridLeftColumn,
        noise: NoiseConfig {
            measurement_var: 0.1,
            process_scale: 1e-4,
        },
        horizon: 50,
        task,
        schedule,
        trials: 200,
        seed: 3,
        filter: FilterInit::default(),
        execution,
    }
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("kf_trials");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let config = grid(exec, Task::Kf, ScheduleConfig::RandomUniform { size: 12 });
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &config, |b, cfg| b.iter(|| run(cfg).unwrap()));
    }
    group.finish();
}

fn greedy(c: &mut Criterion) {
    let config = grid(Execution::Sequential, Task::SsKf, ScheduleConfig::Designed { design: DesignConfig::GreedySteadyState { budget: 8 } });
    let setup = Setup::build(&config).unwrap();
    let mut group = c.benchmark_group("greedy_steady_state");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| greedy_steady_state(&setup.model, 8, DareOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, greedy);
criterion_main!(benches);
