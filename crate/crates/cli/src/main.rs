//! `railflow` command-line entry point.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use railflow::control::dataset::{append_samples, collect_bc_dataset};
use railflow::control::{ControlParams, CONTROLLERS};
use railflow::eval::report::{to_csv, to_json, ReportCell};
use railflow::eval::{generate_scenario, make_controller, run_episode, run_level, LevelSpec, SpeedProfile, TimetableParams};
use railflow::scenario::Scenario;
use railflow::sim::World;
use railflow::trace::{replay, scenario_hash, ReplayVerdict, Trace};

/// `println!` that ignores a closed standard output.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "railflow", version, about = "Railway dispatching and routing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a level scenario.
    Gen(GenArgs),
    /// Run one episode and write its trace.
    Run(RunArgs),
    /// Run controllers over levels and seeds and write reports.
    Bench(BenchArgs),
    /// Re-simulate a trace and compare it tick by tick.
    Replay(ReplayArgs),
    /// Record controller decisions as a behavioural-cloning dataset.
    Collect(CollectArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Benchmark level (0-4).
    #[arg(long, conflicts_with = "scenario")]
    level: Option<u32>,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Arrival-window multiplier used for the horizon.
    #[arg(long)]
    beta: Option<f64>,
    /// `constant` or `fractional:1,1/2,...` (assigned round-robin).
    #[arg(long)]
    speed_profile: Option<SpeedProfile>,
}

#[derive(Args, Clone)]
struct ControlArgs {
    /// full, greedy, mads-greedy, greedy-mapf, deadlock-avoidance, pp or mcts.
    #[arg(long, default_value = "full")]
    controller: String,
    /// MCTS simulations per decision.
    #[arg(long)]
    budget: Option<usize>,
    /// Dispatch conflict window in steps.
    #[arg(long)]
    conflict_window: Option<u32>,
    /// Routing stop window in steps.
    #[arg(long)]
    stop_window: Option<u32>,
}

#[derive(Args)]
struct GenArgs {
    /// Benchmark level (0-4).
    #[arg(long)]
    level: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Arrival-window multiplier used for the horizon.
    #[arg(long)]
    beta: Option<f64>,
    /// `constant` or `fractional:1,1/2,...` (assigned round-robin).
    #[arg(long)]
    speed_profile: Option<SpeedProfile>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    control: ControlArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file (line-delimited JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated levels.
    #[arg(long, default_value = "0,1,2,3,4")]
    level: String,
    /// Comma-separated controllers.
    #[arg(long, default_value = "full,greedy,deadlock-avoidance,pp")]
    controller: String,
    /// `a..b`, `a..=b` or a comma list.
    #[arg(long, default_value = "0..50")]
    seeds: String,
    /// MCTS simulations per decision.
    #[arg(long)]
    budget: Option<usize>,
    /// Arrival-window multiplier used for the horizon.
    #[arg(long)]
    beta: Option<f64>,
    /// Dispatch conflict window in steps.
    #[arg(long)]
    conflict_window: Option<u32>,
    /// Routing stop window in steps.
    #[arg(long)]
    stop_window: Option<u32>,
    /// `constant` or `fractional:1,1/2,...` (assigned round-robin).
    #[arg(long)]
    speed_profile: Option<SpeedProfile>,
    /// Output directory; one subdirectory per controller.
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace file written by `run`.
    trace: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    /// Comma-separated levels; ignored when --scenario is given.
    #[arg(long, default_value = "1,2,3")]
    level: String,
    /// Scenario files, repeatable.
    #[arg(long)]
    scenario: Vec<PathBuf>,
    #[command(flatten)]
    control: ControlArgs,
    /// `a..b`, `a..=b` or a comma list.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    /// Arrival-window multiplier used for the horizon.
    #[arg(long)]
    beta: Option<f64>,
    /// `constant` or `fractional:1,1/2,...` (assigned round-robin).
    #[arg(long)]
    speed_profile: Option<SpeedProfile>,
    /// Drop samples from trains that did not arrive.
    #[arg(long)]
    filter_failed: bool,
    /// Dataset file; the manifest is written next to it.
    #[arg(long, default_value = "dataset.jsonl")]
    out: PathBuf,
}

/// Usage problems detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let s = s.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
        (a.trim().parse()?..=b.trim().parse()?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (a.trim().parse()?..b.trim().parse()?).collect()
    } else {
        s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!("empty seed set '{s}'");
    }
    Ok(seeds)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| anyhow!("bad {what} '{x}'")))
        .collect()
}

fn level_spec(id: u32, profile: &Option<SpeedProfile>) -> anyhow::Result<LevelSpec> {
    let l = LevelSpec::level(id).map_err(|e| usage(e.to_string()))?;
    Ok(match profile {
        Some(p) => l.with_speeds(p.clone()),
        None => l,
    })
}

fn timetable(beta: Option<f64>) -> TimetableParams {
    let mut t = TimetableParams::default();
    if let Some(b) = beta {
        t.beta = b;
    }
    t
}

fn control_params(budget: Option<usize>, conflict_window: Option<u32>, stop_window: Option<u32>) -> ControlParams {
    let mut p = ControlParams::default();
    if let Some(b) = budget {
        p.mcts.budget = b;
    }
    if let Some(w) = conflict_window {
        p.conflict_window = w;
    }
    if let Some(s) = stop_window {
        p.stop_window = s;
    }
    p
}

fn check_controller(name: &str) -> anyhow::Result<()> {
    if CONTROLLERS.contains(&name) {
        Ok(())
    } else {
        Err(usage(format!("unknown controller '{name}' (known: {})", CONTROLLERS.join(", "))))
    }
}

fn read_scenario(path: &Path, beta: Option<f64>) -> anyhow::Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = Scenario::from_json(&text)?;
    if let Some(b) = beta {
        sc.config.beta = b;
    }
    Ok(sc)
}

fn load_scenario(a: &ScenarioArgs, seed: u64) -> anyhow::Result<Scenario> {
    match (&a.scenario, a.level) {
        (Some(path), None) => {
            if a.speed_profile.is_some() {
                return Err(usage("--speed-profile applies to --level only"));
            }
            read_scenario(path, a.beta)
        }
        (None, Some(l)) => Ok(generate_scenario(&level_spec(l, &a.speed_profile)?, seed, &timetable(a.beta))?),
        _ => Err(usage("exactly one of --level or --scenario is required")),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let sc = generate_scenario(&level_spec(a.level, &a.speed_profile)?, a.seed, &timetable(a.beta))?;
    write_or_print(&a.out, &sc.to_json())?;
    eprintln!(
        "scenario {} trains={} size={}x{} map_hash={:016x}",
        scenario_hash(&sc),
        sc.trains.len(),
        sc.grid.width,
        sc.grid.height,
        sc.grid.content_hash()
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    check_controller(&a.control.controller)?;
    let params = control_params(a.control.budget, a.control.conflict_window, a.control.stop_window);
    let sc = load_scenario(&a.scenario, a.seed)?;
    let world = World::new(sc)?;
    let mut ctl = make_controller(&a.control.controller, &params, &world, a.seed)?;
    let run = run_episode(&world, ctl.as_mut(), a.seed, &params).map_err(|e| anyhow!("seed {}: {e}", a.seed))?;
    if let Some(p) = &a.out {
        run.trace.write(p).with_context(|| format!("writing {}", p.display()))?;
    }
    out!("{}", serde_json::to_string_pretty(&run.metrics)?);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let levels: Vec<u32> = parse_list(&a.level, "level").map_err(|e| usage(e.to_string()))?;
    let controllers: Vec<String> = parse_list(&a.controller, "controller")?;
    for c in &controllers {
        check_controller(c)?;
    }
    let seeds = parse_seeds(&a.seeds).map_err(|e| usage(e.to_string()))?;
    let params = control_params(a.budget, a.conflict_window, a.stop_window);
    let tt = timetable(a.beta);
    let specs: Vec<LevelSpec> = levels
        .iter()
        .map(|&l| level_spec(l, &a.speed_profile))
        .collect::<anyhow::Result<_>>()?;
    let mut failed = 0;
    for c in &controllers {
        let dir = a.out.join(c);
        fs::create_dir_all(&dir)?;
        let mut cells = Vec::new();
        let mut series = String::from("level,tick,mean_active\n");
        let mut hist = String::from("level,context,action,count\n");
        for spec in &specs {
            let results = run_level(spec, c, &params, &seeds, &tt)?;
            let cell = ReportCell::from_results(&spec.name(), c, &results);
            for (seed, err) in &cell.failed_seeds {
                eprintln!("{} {} seed {seed}: {err}", spec.name(), c);
            }
            failed += cell.failed_seeds.len();
            let ok: Vec<_> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let len = ok.iter().map(|m| m.active_series.len()).max().unwrap_or(0);
            for t in 0..len {
                let mean = ok.iter().map(|m| m.active_series.get(t).copied().unwrap_or(0) as f64).sum::<f64>()
                    / ok.len().max(1) as f64;
                series.push_str(&format!("{},{t},{mean:.4}\n", spec.name()));
            }
            let mut h = railflow::eval::ActionHistogram::default();
            for m in &ok {
                h.merge(&m.histogram);
            }
            for (ci, ctx) in railflow::eval::metrics::CONTEXTS.iter().enumerate() {
                for (ai, act) in railflow::sim::RawAction::ALL.iter().enumerate() {
                    hist.push_str(&format!("{},{ctx},{act:?},{}\n", spec.name(), h.counts[ci][ai]));
                }
            }
            eprintln!(
                "{} {}: {} episodes, success {:.3}",
                spec.name(),
                c,
                cell.episodes,
                cell.get("success_rate").map_or(0.0, |s| s.mean)
            );
            cells.push(cell);
        }
        fs::write(dir.join("report.csv"), to_csv(&cells))?;
        fs::write(dir.join("report.json"), to_json(&cells))?;
        fs::write(dir.join("concurrency.csv"), series)?;
        fs::write(dir.join("actions.csv"), hist)?;
    }
    if failed > 0 {
        bail!("{failed} episode(s) failed; see report failed_seeds");
    }
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> anyhow::Result<()> {
    let trace = Trace::read(&a.trace)?;
    match replay(&trace)? {
        ReplayVerdict::Ok { ticks } => {
            out!("OK {ticks} ticks");
            Ok(())
        }
        ReplayVerdict::Diverged { tick, expected, found } => {
            // A closed stdout must not mask the verdict.
            let _ = writeln!(std::io::stdout(), "DIVERGED at tick {tick}\nexpected: {expected}\nfound:    {found}");
            bail!("trace diverged at tick {tick}")
        }
    }
}

fn cmd_collect(a: CollectArgs) -> anyhow::Result<()> {
    check_controller(&a.control.controller)?;
    if a.control.controller == "pp" {
        return Err(usage("collect needs a hierarchical controller"));
    }
    let params = control_params(a.control.budget, a.control.conflict_window, a.control.stop_window);
    let seeds = parse_seeds(&a.seeds).map_err(|e| usage(e.to_string()))?;
    let scenarios: Vec<Scenario> = if a.scenario.is_empty() {
        let levels: Vec<u32> = parse_list(&a.level, "level").map_err(|e| usage(e.to_string()))?;
        // One scenario per level, drawn from the first seed; episodes then vary the seed.
        levels
            .iter()
            .map(|&l| Ok(generate_scenario(&level_spec(l, &a.speed_profile)?, seeds[0], &timetable(a.beta))?))
            .collect::<anyhow::Result<_>>()?
    } else {
        a.scenario.iter().map(|p| read_scenario(p, a.beta)).collect::<anyhow::Result<_>>()?
    };
    let (samples, manifest) = collect_bc_dataset(&scenarios, &a.control.controller, &params, &seeds, a.filter_failed)?;
    if a.out.exists() {
        fs::remove_file(&a.out)?;
    }
    append_samples(&a.out, &samples)?;
    let mpath = a.out.with_extension("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    if samples.is_empty() {
        eprintln!("warning: dataset is empty ({} samples dropped)", manifest.dropped);
    }
    out!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Collect(a) => cmd_collect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_seeds("5, 1,9").unwrap(), vec![5, 1, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
