//! Episode runner, benchmarks and reports.

pub mod levels;
pub mod metrics;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::PpController;
use crate::control::{hierarchical, ControlParams, Controller};
use crate::error::{Error, Result};
use crate::sim::{SimState, World};
use crate::trace::{Recorder, Trace, TraceHeader};

pub use levels::{generate_scenario, LevelSpec, SpeedProfile, TimetableParams};
pub use metrics::{compute_metrics, ActionHistogram, EpisodeMetrics, OutcomeCounts};
pub use report::{ci95, ReportCell, Summary};

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub trace: Trace,
    pub final_state: SimState,
    pub metrics: EpisodeMetrics,
}

/// Runs one episode to completion, recording every tick.
pub fn run_episode(world: &World, controller: &mut dyn Controller, seed: u64, params: &ControlParams) -> Result<EpisodeRun> {
    let header = TraceHeader::new(world, seed, &controller.name(), params.conflict_window, params.stop_window);
    let mut rec = Recorder::new(header);
    let mut state = world.reset(seed);
    while !state.finished {
        let actions = controller.act(world, &state)?;
        let events = world.step(&mut state, &actions)?;
        controller.observe(world, &state, &events)?;
        rec.record(world, &state, &actions, events);
    }
    let trace = rec.finish()?;
    let metrics = trace.footer.as_ref().expect("finished trace").metrics.clone();
    Ok(EpisodeRun {
        trace,
        final_state: state,
        metrics,
    })
}

/// Builds any named controller, including the planning baseline.
pub fn make_controller(name: &str, params: &ControlParams, world: &World, seed: u64) -> Result<Box<dyn Controller>> {
    if name == "pp" {
        return Ok(Box::new(PpController::new(world)));
    }
    Ok(Box::new(hierarchical(name, params, seed)?))
}

/// Outcome of one (scenario seed, controller) episode in a benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<EpisodeMetrics>,
    pub error: Option<String>,
}

/// Worker count from `RAILFLOW_THREADS`, else rayon's default.
pub fn thread_count() -> usize {
    std::env::var("RAILFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Generates the level scenario for every seed and runs the controller on each.
/// Failed seeds are reported, not fatal.
pub fn run_level(
    level: &LevelSpec,
    controller: &str,
    params: &ControlParams,
    seeds: &[u64],
    timetable: &TimetableParams,
) -> Result<Vec<SeedResult>> {
    if controller != "pp" {
        hierarchical(controller, params, 0)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run = || -> Result<EpisodeMetrics> {
                    let sc = generate_scenario(level, seed, timetable)?;
                    let world = World::new(sc)?;
                    let mut ctl = make_controller(controller, params, &world, seed)?;
                    Ok(run_episode(&world, ctl.as_mut(), seed, params)?.metrics)
                };
                match run() {
                    Ok(m) => SeedResult {
                        seed,
                        metrics: Some(m),
                        error: None,
                    },
                    Err(e) => SeedResult {
                        seed,
                        metrics: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    }))
}

/// Runs a level and aggregates it into one report cell.
pub fn bench_cell(
    level: &LevelSpec,
    controller: &str,
    params: &ControlParams,
    seeds: &[u64],
    timetable: &TimetableParams,
) -> Result<ReportCell> {
    let results = run_level(level, controller, params, seeds, timetable)?;
    Ok(ReportCell::from_results(&level.name(), controller, &results))
}

/// Active-train series and operational window for one level episode under a speed profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcurrencyTrace {
    pub profile: String,
    pub active_series: Vec<u32>,
    pub peak_active: u32,
    pub length: u32,
    pub operational_window: Option<u32>,
}

pub fn concurrency_trace(
    level: &LevelSpec,
    controller: &str,
    params: &ControlParams,
    seed: u64,
    timetable: &TimetableParams,
) -> Result<ConcurrencyTrace> {
    let sc = generate_scenario(level, seed, timetable)?;
    let world = World::new(sc)?;
    let mut ctl = make_controller(controller, params, &world, seed)?;
    let m = run_episode(&world, ctl.as_mut(), seed, params)?.metrics;
    Ok(ConcurrencyTrace {
        profile: level.speed_profile.to_string(),
        peak_active: m.peak_active(),
        length: m.length,
        operational_window: m.operational_window,
        active_series: m.active_series,
    })
}

/// Sums raw-action histograms over seeds.
pub fn action_histogram(
    level: &LevelSpec,
    controller: &str,
    params: &ControlParams,
    seeds: &[u64],
    timetable: &TimetableParams,
) -> Result<ActionHistogram> {
    let mut total = ActionHistogram::default();
    for r in run_level(level, controller, params, seeds, timetable)? {
        match r.metrics {
            Some(m) => total.merge(&m.histogram),
            None => return Err(Error::Trace(r.error.unwrap_or_default()).with_seed(r.seed)),
        }
    }
    Ok(total)
}

/// Policy combinations for the ablation: both heuristic, each half alone, both greedy.
pub const ABLATION: [&str; 4] = ["full", "mads-greedy", "greedy-mapf", "greedy"];

pub fn ablation_suite(
    level: &LevelSpec,
    params: &ControlParams,
    seeds: &[u64],
    timetable: &TimetableParams,
) -> Result<Vec<ReportCell>> {
    ABLATION
        .iter()
        .map(|c| bench_cell(level, c, params, seeds, timetable))
        .collect()
}
