//! Per-episode metrics computed from a trace.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{decode_actions, Event, RawAction};
use crate::trace::Trace;

pub const CONTEXTS: [&str; 3] = ["off_map", "on_map", "finished"];

/// Raw action counts by the issuing train's situation at the time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHistogram {
    /// `counts[context][action]`, actions in NOOP, STOP, FORWARD, LEFT, RIGHT order.
    pub counts: [[u64; 5]; 3],
    /// FORWARD actions that placed a train on the map.
    pub departures: u64,
}

impl ActionHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn forward_total(&self) -> u64 {
        self.counts.iter().map(|c| c[action_index(RawAction::Forward)]).sum()
    }

    /// Share of all FORWARD actions that were departures.
    pub fn departure_share(&self) -> f64 {
        let f = self.forward_total();
        if f == 0 {
            0.0
        } else {
            self.departures as f64 / f as f64
        }
    }

    pub fn merge(&mut self, other: &ActionHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.departures += other.departures;
    }
}

fn action_index(a: RawAction) -> usize {
    RawAction::ALL.iter().position(|&b| b == a).expect("listed")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub arrived: usize,
    pub deadlocked: usize,
    pub cancelled: usize,
    pub other: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.arrived + self.deadlocked + self.cancelled + self.other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub n_trains: usize,
    pub t_max: u32,
    pub counts: OutcomeCounts,
    pub success_rate: f64,
    pub deadlock_rate: f64,
    pub cancelled_rate: f64,
    pub other_rate: f64,
    /// Mean delay in ticks over dispatched trains.
    pub arrival_delay: f64,
    /// Ticks simulated.
    pub length: u32,
    /// Latest arrival minus earliest departure, when anything arrived.
    pub operational_window: Option<u32>,
    pub active_series: Vec<u32>,
    pub histogram: ActionHistogram,
}

impl EpisodeMetrics {
    pub fn peak_active(&self) -> u32 {
        self.active_series.iter().copied().max().unwrap_or(0)
    }

    /// Named scalar metrics for reports.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("success_rate", self.success_rate),
            ("deadlock_rate", self.deadlock_rate),
            ("cancelled_rate", self.cancelled_rate),
            ("other_rate", self.other_rate),
            ("arrival_delay", self.arrival_delay),
            ("length", self.length as f64),
            ("peak_active", self.peak_active() as f64),
        ]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Where {
    OffMap,
    OnMap,
    Done,
}

pub fn compute_metrics(trace: &Trace) -> Result<EpisodeMetrics> {
    if trace.footer.is_none() {
        return Err(Error::Trace("truncated trace: no footer".into()));
    }
    let sc = &trace.header.scenario;
    let n = sc.trains.len();
    let t_max = trace.header.t_max;
    let mut place = vec![Where::OffMap; n];
    let mut dispatched = vec![false; n];
    let mut departed_at: Vec<Option<u32>> = vec![None; n];
    let mut arrived_at: Vec<Option<u32>> = vec![None; n];
    let mut flagged: BTreeSet<usize> = BTreeSet::new();
    let mut hist = ActionHistogram::default();
    let mut active_series = Vec::with_capacity(trace.ticks.len());

    for rec in &trace.ticks {
        let actions = decode_actions(&rec.actions)
            .filter(|a| a.len() == n)
            .ok_or_else(|| Error::Trace(format!("bad action string at tick {}", rec.tick)))?;
        for (i, a) in actions.iter().enumerate() {
            let ctx = match place[i] {
                Where::OffMap => 0,
                Where::OnMap => 1,
                Where::Done => 2,
            };
            hist.counts[ctx][action_index(*a)] += 1;
        }
        for e in &rec.events {
            match *e {
                Event::Dispatched { train } => {
                    dispatched[train] = true;
                    departed_at[train] = Some(rec.tick + 1);
                    place[train] = Where::OnMap;
                    hist.departures += 1;
                }
                Event::Arrived { train } => {
                    arrived_at[train] = Some(rec.tick + 1);
                    place[train] = Where::Done;
                }
                Event::Cancelled { train } => place[train] = Where::Done,
                _ => {}
            }
        }
        flagged.extend(rec.deadlocked.iter().copied());
        active_series.push(rec.active as u32);
    }

    let mut c = OutcomeCounts::default();
    let mut delay_sum = 0.0;
    let mut delay_n = 0usize;
    for i in 0..n {
        let sched = sc.trains[i].scheduled_arrival;
        if let Some(a) = arrived_at[i] {
            c.arrived += 1;
            delay_sum += a.saturating_sub(sched) as f64;
            delay_n += 1;
        } else if !dispatched[i] {
            c.cancelled += 1;
        } else {
            if flagged.contains(&i) {
                c.deadlocked += 1;
            } else {
                c.other += 1;
            }
            delay_sum += t_max.saturating_sub(sched) as f64;
            delay_n += 1;
        }
    }
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let latest = arrived_at.iter().flatten().max();
    let earliest = departed_at.iter().flatten().min();
    Ok(EpisodeMetrics {
        n_trains: n,
        t_max,
        counts: c,
        success_rate: rate(c.arrived),
        deadlock_rate: rate(c.deadlocked),
        cancelled_rate: rate(c.cancelled),
        other_rate: rate(c.other),
        arrival_delay: if delay_n == 0 { 0.0 } else { delay_sum / delay_n as f64 },
        length: trace.ticks.len() as u32,
        operational_window: match (latest, earliest) {
            (Some(l), Some(e)) => Some(l.saturating_sub(*e)),
            _ => None,
        },
        active_series,
        histogram: hist,
    })
}
