//! Line-delimited episode traces and deterministic replay.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{compute_metrics, EpisodeMetrics};
use crate::grid::fnv1a64;
use crate::obs::LAYOUT_VERSION;
use crate::path::detect_deadlocks;
use crate::scenario::{CyclePolicy, Scenario};
use crate::sim::{decode_actions, encode_actions, RawAction, SimState, StepEvents, World};

pub const TRACE_VERSION: &str = "railflow-trace-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub controller: String,
    pub t_max: u32,
    pub beta: f64,
    pub conflict_window: u32,
    pub stop_window: u32,
    pub layout: String,
    pub cycle_policy: CyclePolicy,
    pub scenario: Scenario,
}

impl TraceHeader {
    pub fn new(world: &World, seed: u64, controller: &str, conflict_window: u32, stop_window: u32) -> TraceHeader {
        let sc = &world.scenario;
        TraceHeader {
            version: TRACE_VERSION.into(),
            scenario_hash: scenario_hash(sc),
            seed,
            controller: controller.into(),
            t_max: world.t_max,
            beta: sc.config.beta,
            conflict_window,
            stop_window,
            layout: LAYOUT_VERSION.into(),
            cycle_policy: sc.config.cycle_policy,
            scenario: sc.clone(),
        }
    }
}

pub fn scenario_hash(sc: &Scenario) -> String {
    format!("{:016x}", fnv1a64(sc.to_json().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u32,
    /// One action code per train.
    pub actions: String,
    pub events: Vec<crate::sim::Event>,
    /// Trains first flagged as deadlocked after this tick.
    pub deadlocked: Vec<usize>,
    pub active: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub ticks: u32,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header(Box<TraceHeader>),
    Tick(TickRecord),
    Footer(Box<TraceFooter>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub ticks: Vec<TickRecord>,
    pub footer: Option<TraceFooter>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &Line| {
            out.push_str(&serde_json::to_string(l).expect("trace serialisation is infallible"));
            out.push('\n');
        };
        push(&Line::Header(Box::new(self.header.clone())));
        for t in &self.ticks {
            push(&Line::Tick(t.clone()));
        }
        if let Some(f) = &self.footer {
            push(&Line::Footer(Box::new(f.clone())));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn from_reader(r: impl BufRead) -> Result<Trace> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut footer = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if n == 0 {
                // Check the version before decoding the rest of the header.
                let v: serde_json::Value = serde_json::from_str(&line)?;
                let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("").to_string();
                if found != TRACE_VERSION {
                    return Err(Error::VersionMismatch {
                        expected: TRACE_VERSION.into(),
                        found,
                    });
                }
            }
            match serde_json::from_str::<Line>(&line)? {
                Line::Header(h) if header.is_none() => header = Some(*h),
                Line::Tick(t) if header.is_some() && footer.is_none() => ticks.push(t),
                Line::Footer(f) if header.is_some() && footer.is_none() => footer = Some(*f),
                _ => return Err(Error::Trace(format!("unexpected record on line {}", n + 1))),
            }
        }
        let header = header.ok_or_else(|| Error::Trace("missing header".into()))?;
        if header.layout != LAYOUT_VERSION {
            return Err(Error::VersionMismatch {
                expected: LAYOUT_VERSION.into(),
                found: header.layout,
            });
        }
        Ok(Trace { header, ticks, footer })
    }

    pub fn from_jsonl(s: &str) -> Result<Trace> {
        Trace::from_reader(s.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Trace> {
        Trace::from_reader(BufReader::new(File::open(path)?))
    }
}

/// Builds tick records while an episode runs.
pub struct Recorder {
    flagged: BTreeSet<usize>,
    trace: Trace,
}

impl Recorder {
    pub fn new(header: TraceHeader) -> Recorder {
        Recorder {
            flagged: BTreeSet::new(),
            trace: Trace {
                header,
                ticks: Vec::new(),
                footer: None,
            },
        }
    }

    pub fn record(&mut self, world: &World, after: &SimState, actions: &[RawAction], events: StepEvents) -> &TickRecord {
        let now = detect_deadlocks(world.grid(), after);
        let fresh: Vec<usize> = now.difference(&self.flagged).copied().collect();
        self.flagged.extend(fresh.iter().copied());
        self.trace.ticks.push(TickRecord {
            tick: events.tick,
            actions: encode_actions(actions),
            events: events.events,
            deadlocked: fresh,
            active: after.active_count(),
            digest: format!("{:016x}", after.digest()),
        });
        self.trace.ticks.last().expect("just pushed")
    }

    pub fn finish(mut self) -> Result<Trace> {
        self.trace.footer = Some(TraceFooter {
            ticks: self.trace.ticks.len() as u32,
            metrics: placeholder_metrics(),
        });
        let metrics = compute_metrics(&self.trace)?;
        self.trace.footer = Some(TraceFooter {
            ticks: self.trace.ticks.len() as u32,
            metrics,
        });
        Ok(self.trace)
    }
}

fn placeholder_metrics() -> EpisodeMetrics {
    EpisodeMetrics {
        n_trains: 0,
        t_max: 0,
        counts: Default::default(),
        success_rate: 0.0,
        deadlock_rate: 0.0,
        cancelled_rate: 0.0,
        other_rate: 0.0,
        arrival_delay: 0.0,
        length: 0,
        operational_window: None,
        active_series: Vec::new(),
        histogram: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayVerdict {
    Ok { ticks: u32 },
    Diverged { tick: u32, expected: String, found: String },
}

impl ReplayVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ReplayVerdict::Ok { .. })
    }
}

/// Re-simulates a trace from its header and compares every tick record byte for byte.
pub fn replay(trace: &Trace) -> Result<ReplayVerdict> {
    let h = &trace.header;
    if scenario_hash(&h.scenario) != h.scenario_hash {
        return Err(Error::Trace("scenario hash does not match embedded scenario".into()));
    }
    let world = World::new(h.scenario.clone())?;
    if world.t_max != h.t_max {
        return Err(Error::Trace(format!("horizon {} differs from recorded {}", world.t_max, h.t_max)));
    }
    let mut state = world.reset(h.seed);
    let mut rec = Recorder::new(h.clone());
    for recorded in &trace.ticks {
        let diverged = |found: String| ReplayVerdict::Diverged {
            tick: recorded.tick,
            expected: serde_json::to_string(recorded).expect("serialisable"),
            found,
        };
        if state.finished {
            return Ok(diverged("episode already finished".into()));
        }
        let Some(actions) = decode_actions(&recorded.actions) else {
            return Ok(diverged(format!("undecodable actions '{}'", recorded.actions)));
        };
        let ev = match world.step(&mut state, &actions) {
            Ok(ev) => ev,
            Err(e) => return Ok(diverged(e.to_string())),
        };
        let fresh = rec.record(&world, &state, &actions, ev);
        let a = serde_json::to_string(recorded).expect("serialisable");
        let b = serde_json::to_string(fresh).expect("serialisable");
        if a != b {
            return Ok(ReplayVerdict::Diverged {
                tick: recorded.tick,
                expected: a,
                found: b,
            });
        }
    }
    let ticks = trace.ticks.len() as u32;
    if let Some(f) = &trace.footer {
        let again = rec.finish()?;
        let ours = again.footer.expect("finished");
        if serde_json::to_string(&ours)? != serde_json::to_string(f)? {
            return Ok(ReplayVerdict::Diverged {
                tick: ticks,
                expected: serde_json::to_string(f)?,
                found: serde_json::to_string(&ours)?,
            });
        }
    }
    Ok(ReplayVerdict::Ok { ticks })
}
