//! Discrete-time simulator: departures, motion, malfunctions and arrivals.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fnv1a64, Cell, Heading, Pose, RailGrid};
use crate::path::{occupancy, top_k_with_field, Route, RouteTable};
use crate::scenario::{Scenario, TimetableEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RawAction {
    Noop,
    Stop,
    Forward,
    Left,
    Right,
}

impl RawAction {
    pub const ALL: [RawAction; 5] = [
        RawAction::Noop,
        RawAction::Stop,
        RawAction::Forward,
        RawAction::Left,
        RawAction::Right,
    ];

    pub fn code(self) -> char {
        match self {
            RawAction::Noop => 'N',
            RawAction::Stop => 'S',
            RawAction::Forward => 'F',
            RawAction::Left => 'L',
            RawAction::Right => 'R',
        }
    }

    pub fn from_code(c: char) -> Option<RawAction> {
        RawAction::ALL.into_iter().find(|a| a.code() == c)
    }

    /// The movement action that leaves a cell on `exit` when entered on `heading`.
    pub fn for_turn(heading: Heading, exit: Heading) -> Option<RawAction> {
        if exit == heading {
            Some(RawAction::Forward)
        } else if exit == heading.left() {
            Some(RawAction::Left)
        } else if exit == heading.right() {
            Some(RawAction::Right)
        } else {
            None
        }
    }
}

pub type JointAction = Vec<RawAction>;

pub fn encode_actions(actions: &[RawAction]) -> String {
    actions.iter().map(|a| a.code()).collect()
}

pub fn decode_actions(s: &str) -> Option<JointAction> {
    s.chars().map(RawAction::from_code).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    WaitingOffMap,
    ReadyOffMap,
    Active,
    Arrived,
    CancelledAtEnd,
}

impl TrainStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TrainStatus::Arrived | TrainStatus::CancelledAtEnd)
    }

    pub fn is_off_map(self) -> bool {
        matches!(self, TrainStatus::WaitingOffMap | TrainStatus::ReadyOffMap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub status: TrainStatus,
    pub pose: Option<Pose>,
    /// Accumulated movement credit in units of `1/speed.den` cells.
    pub progress: u32,
    pub malfunction: u32,
    pub moving: bool,
    pub last_move: RawAction,
    pub departed_at: Option<u32>,
    pub arrived_at: Option<u32>,
}

impl TrainState {
    fn fresh() -> TrainState {
        TrainState {
            status: TrainStatus::WaitingOffMap,
            pose: None,
            progress: 0,
            malfunction: 0,
            moving: false,
            last_move: RawAction::Forward,
            departed_at: None,
            arrived_at: None,
        }
    }

    pub fn is_malfunctioning(&self) -> bool {
        self.malfunction > 0
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub clock: u32,
    pub t_max: u32,
    pub trains: Vec<TrainState>,
    pub finished: bool,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn active_count(&self) -> usize {
        self.trains.iter().filter(|t| t.status == TrainStatus::Active).count()
    }

    pub fn occupancy(&self) -> HashMap<Cell, usize> {
        occupancy(self)
    }

    /// Stable hash over everything that influences future ticks.
    pub fn digest(&self) -> u64 {
        let mut s = format!("{}|{}|{}|", self.clock, self.finished, self.rng.get_word_pos());
        for t in &self.trains {
            let pose = t
                .pose
                .map(|p| format!("{},{},{}", p.cell.row, p.cell.col, p.heading.index()))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:?}:{pose}:{}:{}:{}:{}:{:?}:{:?};",
                t.status,
                t.progress,
                t.malfunction,
                t.moving as u8,
                t.last_move.code(),
                t.departed_at,
                t.arrived_at
            ));
        }
        fnv1a64(s.as_bytes())
    }
}

/// Opaque copy of a simulator state.
#[derive(Debug, Clone)]
pub struct Snapshot(SimState);

impl Snapshot {
    pub fn restore(&self) -> SimState {
        self.0.clone()
    }
}

pub fn snapshot(state: &SimState) -> Snapshot {
    Snapshot(state.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Chosen exit does not exist for the current pose.
    InvalidTransition,
    /// A lower-id train claimed the same cell.
    Contention,
    /// The target's occupant did not move away.
    Blocked,
    /// Part of a cyclic dependency (including swaps).
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Ready { train: usize },
    MalfunctionStart { train: usize, duration: u32 },
    MalfunctionEnd { train: usize },
    Dispatched { train: usize },
    DispatchBlocked { train: usize },
    Moved { train: usize, to: Pose },
    MoveRejected { train: usize, reason: RejectReason },
    Arrived { train: usize },
    Cancelled { train: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Clock value before the step.
    pub tick: u32,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    Accepted,
    Rejected(RejectReason),
}

/// Resolves simultaneous move intents (`train -> target cell`).
///
/// Lowest id wins contested cells. A winner moves when its target is free or
/// the occupant itself moves; any dependency cycle is rejected as a whole.
pub fn resolve_motion(state: &SimState, intents: &BTreeMap<usize, Cell>) -> BTreeMap<usize, MoveOutcome> {
    let occ = state.occupancy();
    let mut out: BTreeMap<usize, MoveOutcome> = BTreeMap::new();
    let mut claimed: HashMap<Cell, usize> = HashMap::new();
    for (&i, &to) in intents {
        if let std::collections::hash_map::Entry::Vacant(e) = claimed.entry(to) {
            e.insert(i);
        } else {
            out.insert(i, MoveOutcome::Rejected(RejectReason::Contention));
        }
    }

    for &start in intents.keys() {
        if out.contains_key(&start) {
            continue;
        }
        // Follow the chain of occupants until it resolves.
        let mut path: Vec<usize> = vec![start];
        let verdict = loop {
            let cur = *path.last().expect("nonempty");
            let Some(&occupant) = occ.get(&intents[&cur]) else { break MoveOutcome::Accepted };
            if let Some(&o) = out.get(&occupant) {
                break match o {
                    MoveOutcome::Accepted => MoveOutcome::Accepted,
                    MoveOutcome::Rejected(_) => MoveOutcome::Rejected(RejectReason::Blocked),
                };
            }
            if !intents.contains_key(&occupant) {
                break MoveOutcome::Rejected(RejectReason::Blocked);
            }
            if let Some(pos) = path.iter().position(|&p| p == occupant) {
                for &c in &path[pos..] {
                    out.insert(c, MoveOutcome::Rejected(RejectReason::Cycle));
                }
                path.truncate(pos);
                break MoveOutcome::Rejected(RejectReason::Blocked);
            }
            path.push(occupant);
        };
        for &c in &path {
            out.insert(c, verdict);
        }
    }
    out
}

type CandidateKey = (Pose, Cell, usize);

/// A scenario bound to its horizon and precomputed route fields.
#[derive(Debug)]
pub struct World {
    pub scenario: Scenario,
    pub t_max: u32,
    pub routes: RouteTable,
    /// Memoised candidate routes keyed by (origin, target, k).
    candidates: Mutex<HashMap<CandidateKey, Arc<Vec<Route>>>>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Arc<World>> {
        scenario.validate()?;
        let t_max = scenario.horizon()?;
        let routes = RouteTable::for_stations(&scenario.grid);
        Ok(Arc::new(World {
            scenario,
            t_max,
            routes,
            candidates: Mutex::new(HashMap::new()),
        }))
    }

    /// Up to `k` shortest routes from `from` to `target`, computed once per key.
    pub fn candidate_routes(&self, from: Pose, target: Cell, k: usize) -> Result<Arc<Vec<Route>>> {
        let key = (from, target, k);
        if let Some(r) = self.candidates.lock().expect("cache lock").get(&key) {
            return Ok(r.clone());
        }
        let field = self.routes.field(self.grid(), target);
        let routes = Arc::new(top_k_with_field(self.grid(), &field, from, k)?.routes);
        self.candidates.lock().expect("cache lock").insert(key, routes.clone());
        Ok(routes)
    }

    pub fn grid(&self) -> &RailGrid {
        &self.scenario.grid
    }

    pub fn train(&self, i: usize) -> &TimetableEntry {
        &self.scenario.trains[i]
    }

    pub fn n_trains(&self) -> usize {
        self.scenario.trains.len()
    }

    pub fn reset(&self, seed: u64) -> SimState {
        SimState {
            clock: 0,
            t_max: self.t_max,
            trains: vec![TrainState::fresh(); self.n_trains()],
            finished: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Remaining steps from a train's current (or origin) pose to its target.
    pub fn distance_to_target(&self, state: &SimState, i: usize) -> Option<u32> {
        let entry = self.train(i);
        let t = &state.trains[i];
        let pose = match t.status {
            TrainStatus::Active => t.pose?,
            TrainStatus::WaitingOffMap | TrainStatus::ReadyOffMap => entry.origin,
            _ => return Some(0),
        };
        self.routes.field(self.grid(), entry.target).distance(pose)
    }

    /// Exit a raw action would take from `pose`, or `None` if it is invalid.
    pub fn exit_for(&self, pose: Pose, action: RawAction) -> Option<Heading> {
        let exits = self.grid().trans(pose.cell).exits(pose.heading);
        if exits.len() == 1 {
            return exits.iter().next();
        }
        let h = match action {
            RawAction::Forward => pose.heading,
            RawAction::Left => pose.heading.left(),
            RawAction::Right => pose.heading.right(),
            _ => return None,
        };
        exits.contains(h).then_some(h)
    }

    pub fn step(&self, state: &mut SimState, actions: &[RawAction]) -> Result<StepEvents> {
        if state.finished {
            return Err(Error::EpisodeFinished(state.clock));
        }
        let n = self.n_trains();
        if actions.len() > n {
            return Err(Error::InvalidParameter(format!("{} actions for {n} trains", actions.len())));
        }
        let act = |i: usize| actions.get(i).copied().unwrap_or(RawAction::Noop);
        let tick = state.clock;
        let mut events = Vec::new();

        for (i, t) in state.trains.iter_mut().enumerate() {
            if t.status == TrainStatus::WaitingOffMap && tick >= self.train(i).earliest_departure {
                t.status = TrainStatus::ReadyOffMap;
                events.push(Event::Ready { train: i });
            }
        }

        let cfg = &self.scenario.config;
        for (i, t) in state.trains.iter_mut().enumerate() {
            if t.status.is_terminal() {
                continue;
            }
            if t.malfunction > 0 {
                t.malfunction -= 1;
                if t.malfunction == 0 {
                    events.push(Event::MalfunctionEnd { train: i });
                }
            } else if cfg.malfunction_rate > 0.0 && state.rng.gen::<f64>() < cfg.malfunction_rate {
                let (lo, hi) = cfg.malfunction_duration;
                let d = state.rng.gen_range(lo..=hi);
                t.malfunction = d;
                events.push(Event::MalfunctionStart { train: i, duration: d });
            }
        }

        // Motion of on-map trains.
        let mut intents: BTreeMap<usize, Cell> = BTreeMap::new();
        let mut exits: HashMap<usize, Heading> = HashMap::new();
        for i in 0..n {
            let t = &mut state.trains[i];
            if t.status != TrainStatus::Active {
                continue;
            }
            let a = act(i);
            let wants = match a {
                RawAction::Stop => {
                    t.moving = false;
                    None
                }
                RawAction::Noop => t.moving.then_some(t.last_move),
                m => {
                    t.moving = true;
                    t.last_move = m;
                    Some(m)
                }
            };
            let (Some(m), false) = (wants, t.is_malfunctioning()) else { continue };
            let speed = self.train(i).speed;
            t.progress += speed.num();
            if t.progress < speed.den() {
                continue;
            }
            let pose = t.pose.expect("active trains are on the map");
            match self.exit_for(pose, m) {
                Some(h) => {
                    let to = self.grid().neighbour(pose.cell, h).expect("validated grid");
                    intents.insert(i, to);
                    exits.insert(i, h);
                }
                None => {
                    t.progress = speed.den();
                    events.push(Event::MoveRejected {
                        train: i,
                        reason: RejectReason::InvalidTransition,
                    })
                }
            }
        }
        let outcomes = resolve_motion(state, &intents);
        for (&i, &o) in &outcomes {
            let t = &mut state.trains[i];
            match o {
                MoveOutcome::Accepted => {
                    let to = Pose::new(intents[&i], exits[&i]);
                    t.progress -= self.train(i).speed.den();
                    events.push(Event::Moved { train: i, to });
                    if to.cell == self.train(i).target {
                        t.status = TrainStatus::Arrived;
                        t.pose = None;
                        t.moving = false;
                        t.arrived_at = Some(tick + 1);
                        events.push(Event::Arrived { train: i });
                    } else {
                        t.pose = Some(to);
                    }
                }
                MoveOutcome::Rejected(reason) => {
                    t.progress = self.train(i).speed.den();
                    events.push(Event::MoveRejected { train: i, reason })
                }
            }
        }

        // Departures onto cells left free after motion.
        let mut occ = state.occupancy();
        for i in 0..n {
            let t = &mut state.trains[i];
            if t.status != TrainStatus::ReadyOffMap || act(i) != RawAction::Forward || t.is_malfunctioning() {
                continue;
            }
            let origin = self.train(i).origin;
            if occ.contains_key(&origin.cell) {
                events.push(Event::DispatchBlocked { train: i });
                continue;
            }
            occ.insert(origin.cell, i);
            t.status = TrainStatus::Active;
            t.pose = Some(origin);
            t.progress = 0;
            t.moving = true;
            t.last_move = RawAction::Forward;
            t.departed_at = Some(tick + 1);
            events.push(Event::Dispatched { train: i });
        }

        state.clock += 1;
        if state.clock >= state.t_max {
            for (i, t) in state.trains.iter_mut().enumerate() {
                if t.status.is_off_map() {
                    t.status = TrainStatus::CancelledAtEnd;
                    events.push(Event::Cancelled { train: i });
                }
            }
            state.finished = true;
        } else if state.trains.iter().all(|t| t.status.is_terminal()) {
            state.finished = true;
        }
        debug_assert_eq!(state.occupancy().len(), state.active_count());
        Ok(StepEvents { tick, events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Heading::*;
    use crate::grid::{CellTransitions, HeadingSet, Station};
    use crate::scenario::{EpisodeConfig, Speed};

    fn corridor_world(len: u32, trains: Vec<(u32, Heading, u32, u32)>, speed: Speed) -> Arc<World> {
        let mut g = RailGrid::empty(len, 1);
        for c in 0..len {
            let mut s = HeadingSet::EMPTY;
            if c > 0 {
                s.insert(West);
            }
            if c + 1 < len {
                s.insert(East);
            }
            g.set_transitions(Cell::new(0, c), CellTransitions::from_connections(s)).unwrap();
        }
        g.stations = vec![
            Station { cell: Cell::new(0, 0), city: 0 },
            Station { cell: Cell::new(0, len - 1), city: 1 },
        ];
        let trains = trains
            .into_iter()
            .enumerate()
            .map(|(id, (oc, h, tc, ed))| TimetableEntry {
                id,
                origin: Pose::new(Cell::new(0, oc), h),
                target: Cell::new(0, tc),
                earliest_departure: ed,
                scheduled_arrival: ed + 20,
                speed,
            })
            .collect();
        let sc = Scenario {
            grid: g,
            trains,
            config: EpisodeConfig {
                t_max: Some(60),
                ..Default::default()
            },
        };
        World::new(sc).unwrap()
    }

    #[test]
    fn single_train_runs_to_target() {
        let w = corridor_world(6, vec![(0, West, 5, 0)], Speed::ONE);
        let mut s = w.reset(0);
        let mut ticks = 0;
        while !s.finished {
            w.step(&mut s, &[RawAction::Forward]).unwrap();
            ticks += 1;
        }
        assert_eq!(s.trains[0].status, TrainStatus::Arrived);
        assert_eq!(ticks, 6);
        assert_eq!(s.trains[0].departed_at, Some(1));
        assert_eq!(s.trains[0].arrived_at, Some(6));
        assert!(matches!(w.step(&mut s, &[]), Err(Error::EpisodeFinished(6))));
    }

    #[test]
    fn half_speed_moves_every_other_tick() {
        let w = corridor_world(6, vec![(0, West, 5, 0)], Speed::new(1, 2).unwrap());
        let mut s = w.reset(0);
        w.step(&mut s, &[RawAction::Forward]).unwrap();
        let mut cols = vec![];
        for _ in 0..4 {
            w.step(&mut s, &[RawAction::Noop]).unwrap();
            cols.push(s.trains[0].pose.unwrap().cell.col);
        }
        assert_eq!(cols, vec![0, 1, 1, 2]);
    }

    #[test]
    fn head_on_swap_is_rejected() {
        let w = corridor_world(6, vec![(0, West, 5, 0), (5, East, 0, 0)], Speed::ONE);
        let mut s = w.reset(0);
        for _ in 0..8 {
            w.step(&mut s, &[RawAction::Forward, RawAction::Forward]).unwrap();
        }
        let a = s.trains[0].pose.unwrap().cell.col;
        let b = s.trains[1].pose.unwrap().cell.col;
        assert_eq!(b, a + 1);
        let dl = crate::path::detect_deadlocks(w.grid(), &s);
        assert_eq!(dl.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn stop_and_noop_semantics() {
        let w = corridor_world(8, vec![(0, West, 7, 0)], Speed::ONE);
        let mut s = w.reset(0);
        w.step(&mut s, &[RawAction::Forward]).unwrap();
        w.step(&mut s, &[RawAction::Noop]).unwrap();
        assert_eq!(s.trains[0].pose.unwrap().cell.col, 1);
        w.step(&mut s, &[RawAction::Stop]).unwrap();
        w.step(&mut s, &[RawAction::Noop]).unwrap();
        assert_eq!(s.trains[0].pose.unwrap().cell.col, 1);
        w.step(&mut s, &[RawAction::Forward]).unwrap();
        assert_eq!(s.trains[0].pose.unwrap().cell.col, 2);
    }

    #[test]
    fn never_dispatched_is_cancelled() {
        let w = corridor_world(6, vec![(0, West, 5, 0)], Speed::ONE);
        let mut s = w.reset(0);
        while !s.finished {
            w.step(&mut s, &[RawAction::Noop]).unwrap();
        }
        assert_eq!(s.clock, 60);
        assert_eq!(s.trains[0].status, TrainStatus::CancelledAtEnd);
    }

    #[test]
    fn action_codes_round_trip() {
        let a = vec![RawAction::Noop, RawAction::Forward, RawAction::Stop, RawAction::Left, RawAction::Right];
        assert_eq!(encode_actions(&a), "NFSLR");
        assert_eq!(decode_actions("NFSLR"), Some(a));
        assert_eq!(decode_actions("X"), None);
    }
}
