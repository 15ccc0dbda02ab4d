use std::fs;
use std::path::Path;
use std::process::Command;

use graph_track::experiment::{
    BandConfig, ExperimentConfig, FilterInit, GraphSource, InitialState, NoiseConfig, ProcessConfig, RunReport, ScheduleConfig, Task,
};
use graph_track::parallel::Execution;
use graph_track::spectral_graph::ShiftKind;

fn config(dir: &Path) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        graph: GraphSource::Grid { rows: 3, cols: 5 },
        shift: ShiftKind::Laplacian,
        process: ProcessConfig::Diffusion { rate: 0.5 },
        band: BandConfig::Lowest { count: 4 },
        initial_state: InitialState::GridLeftColumn,
        noise: NoiseConfig {
            measurement_var: 0.01,
            process_scale: 1e-4,
        },
        horizon: 10,
        task: Task::Kf,
        schedule: ScheduleConfig::RandomUniform { size: 6 },
        trials: 20,
        seed: 11,
        filter: FilterInit::default(),
        execution: Execution::Parallel,
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_graph-track")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn track_writes_outputs_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("run");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    cli(&["track", "kf", "--config", cfg, "--out", out]);
    for f in ["report.json", "schedule.json", "trace.csv"] {
        assert!(Path::new(out).join(f).exists(), "{f} missing");
    }
    let trace = fs::read_to_string(Path::new(out).join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "t,nmse_db,tr_p_post,samples");
    assert_eq!(trace.lines().count(), 11);
    let report: RunReport = serde_json::from_str(&fs::read_to_string(Path::new(out).join("report.json")).unwrap()).unwrap();
    assert_eq!(report.trials, 20);
    let printed = cli(&["report", "--out", out]);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("NMSE"));
}

#[test]
fn seed_and_trial_overrides_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let read = |name: &str| {
        let out = dir.path().join(name);
        cli(&["observe", "--config", cfg, "--seed", "5", "--trials", "7", "--out", out.to_str().unwrap()]);
        fs::read_to_string(out.join("report.json")).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    assert_eq!(a, b);
    let report: RunReport = serde_json::from_str(&a).unwrap();
    assert_eq!((report.config.seed, report.trials), (5, 7));
}

#[test]
fn graph_design_and_simulate_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    cli(&["graph", "build", "--config", cfg, "--out", o]);
    let edges = graph_track::experiment::io::load_edges_csv(out.join("edges.csv")).unwrap();
    assert_eq!(edges.node_count(), 15);
    cli(&["design", "greedy-ss", "--budget", "3", "--config", cfg, "--out", o]);
    assert!(out.join("design.json").exists());
    cli(&["design", "det", "--gamma", "1.0", "--config", cfg, "--out", o]);
    cli(&["design", "kf-step", "--gamma", "1.0", "--config", cfg, "--out", o]);
    cli(&["simulate", "--config", cfg, "--out", o]);
    let states = graph_track::experiment::io::load_signals_csv(out.join("states.csv")).unwrap();
    assert_eq!((states.nrows(), states.ncols()), (11, 15));
}

#[test]
fn missing_config_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_graph-track")).arg("observe").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
