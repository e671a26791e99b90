//! Prioritized planning with space-time reservations, and closed-loop plan execution.
//!
//! Plans keep a one-tick gap: a train only enters a cell that is free both
//! before and after its move. Followers therefore never chase a train into the
//! cell it is vacating, which rules out chains and cycles in the simulator's
//! motion resolution, so every planned move is accepted exactly as planned.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::error::{Error, Result};
use crate::grid::{Cell, Pose};
use crate::sim::{Event, JointAction, RawAction, SimState, StepEvents, TrainStatus, World};

const MAX_EXPANSIONS: usize = 400_000;

#[derive(Debug, Clone, Default)]
pub struct ReservationTable {
    cells: HashMap<(Cell, u32), usize>,
    edges: HashMap<(Cell, Cell, u32), usize>,
}

impl ReservationTable {
    pub fn holder(&self, cell: Cell, t: u32) -> Option<usize> {
        self.cells.get(&(cell, t)).copied()
    }

    fn free(&self, cell: Cell, t: u32, me: usize) -> bool {
        self.holder(cell, t).is_none_or(|h| h == me)
    }

    /// Books a cell; returns the previous holder on a double booking.
    pub fn reserve(&mut self, cell: Cell, t: u32, train: usize) -> std::result::Result<(), usize> {
        match self.cells.insert((cell, t), train) {
            Some(h) if h != train => Err(h),
            _ => Ok(()),
        }
    }

    pub fn reserve_edge(&mut self, from: Cell, to: Cell, t: u32, train: usize) -> std::result::Result<(), usize> {
        if let Some(&h) = self.edges.get(&(to, from, t)) {
            if h != train {
                return Err(h);
            }
        }
        self.edges.insert((from, to, t), train);
        Ok(())
    }

    fn edge_free(&self, from: Cell, to: Cell, t: u32, me: usize) -> bool {
        self.edges.get(&(to, from, t)).is_none_or(|&h| h == me)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceTimePlan {
    pub train: usize,
    /// Tick of the first planned action.
    pub start: u32,
    /// One action per tick from `start`.
    pub actions: Vec<RawAction>,
    /// Location after each action (`None` while off the map or after arrival).
    pub poses: Vec<Option<Pose>>,
    pub arrival: Option<u32>,
}

impl SpaceTimePlan {
    pub fn action_at(&self, tick: u32) -> RawAction {
        tick.checked_sub(self.start)
            .and_then(|k| self.actions.get(k as usize))
            .copied()
            .unwrap_or(RawAction::Noop)
    }

    /// Planned location at time `t` (state clock), if the plan covers it.
    pub fn pose_at(&self, t: u32) -> Option<Option<Pose>> {
        let k = t.checked_sub(self.start + 1)?;
        self.poses.get(k as usize).copied()
    }

    /// `(time, pose)` for every tick the train is on the map.
    pub fn timed_poses(&self) -> Vec<(u32, Pose)> {
        self.poses
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.map(|p| (self.start + k as u32 + 1, p)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanOutcome {
    Planned(SpaceTimePlan),
    Cancelled,
}

impl PlanOutcome {
    pub fn plan(&self) -> Option<&SpaceTimePlan> {
        match self {
            PlanOutcome::Planned(p) => Some(p),
            PlanOutcome::Cancelled => None,
        }
    }
}

/// Earliest departure first, then longer trips, then id.
pub fn priority_order(world: &World) -> Vec<usize> {
    let grid = world.grid();
    let mut ids: Vec<usize> = (0..world.n_trains()).collect();
    let cost = |i: usize| {
        let e = world.train(i);
        world.routes.field(grid, e.target).distance(e.origin).unwrap_or(u32::MAX)
    };
    ids.sort_by_key(|&i| (world.train(i).earliest_departure, Reverse(cost(i)), i));
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Key {
    loc: Option<Pose>,
    t: u32,
    acc: u32,
}

struct Node {
    key: Key,
    parent: usize,
    action: RawAction,
}

/// Where a train stands at the start of planning.
#[derive(Debug, Clone, Copy)]
struct Start {
    loc: Option<Pose>,
    acc: u32,
    /// Ticks during which the train cannot act.
    frozen: u32,
}

fn start_of(state: &SimState, train: usize) -> Start {
    let t = &state.trains[train];
    Start {
        loc: t.pose,
        acc: t.progress,
        frozen: t.malfunction.saturating_sub(1),
    }
}

/// Space-time A* for one train against `table`, starting at `t0`.
fn plan_one(world: &World, table: &ReservationTable, train: usize, t0: u32, start: Start) -> Option<SpaceTimePlan> {
    let grid = world.grid();
    let entry = world.train(train);
    let field = world.routes.field(grid, entry.target);
    let (num, den) = (entry.speed.num(), entry.speed.den());
    let t_max = world.t_max;
    let h = |k: &Key| -> Option<u32> {
        match k.loc {
            None => field.distance(entry.origin).map(|d| 1 + entry.speed.travel_ticks(d)),
            Some(p) => field
                .distance(p)
                .map(|d| ((d as u64 * den as u64).saturating_sub(k.acc as u64)).div_ceil(num as u64) as u32),
        }
    };
    let root = Key {
        loc: start.loc,
        t: t0,
        acc: start.acc,
    };
    h(&root)?;
    if let Some(p) = start.loc {
        if !table.free(p.cell, t0, train) {
            return None;
        }
    }
    let mut nodes = vec![Node {
        key: root,
        parent: usize::MAX,
        action: RawAction::Noop,
    }];
    let mut open = BinaryHeap::new();
    let mut closed: HashSet<Key> = HashSet::new();
    open.push(Reverse((t0 + h(&root).unwrap_or(0), Reverse(t0), 0usize)));
    let mut goal: Option<(usize, u32)> = None;
    let mut expansions = 0;

    while let Some(Reverse((_, _, id))) = open.pop() {
        let k = nodes[id].key;
        if !closed.insert(k) {
            continue;
        }
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return None;
        }
        if k.t >= t_max {
            continue;
        }
        let t = k.t;
        let frozen = t < t0 + start.frozen;
        let mut succ: Vec<(Key, RawAction, bool)> = Vec::new();
        match k.loc {
            None => {
                succ.push((Key { t: t + 1, ..k }, RawAction::Noop, false));
                let o = entry.origin.cell;
                if !frozen && t >= entry.earliest_departure && table.free(o, t, train) && table.free(o, t + 1, train) {
                    succ.push((
                        Key {
                            loc: Some(entry.origin),
                            t: t + 1,
                            acc: 0,
                        },
                        RawAction::Forward,
                        false,
                    ));
                }
            }
            Some(p) => {
                if table.free(p.cell, t + 1, train) {
                    succ.push((Key { t: t + 1, ..k }, RawAction::Stop, false));
                }
                if !frozen {
                    let acc = k.acc + num;
                    if acc < den {
                        if table.free(p.cell, t + 1, train) {
                            let a = field
                                .best_exit(grid, p)
                                .and_then(|ex| move_action(grid, p, ex))
                                .unwrap_or(RawAction::Forward);
                            succ.push((Key { acc, t: t + 1, ..k }, a, false));
                        }
                    } else {
                        for next in grid.successors(p) {
                            if field.distance(next).is_none() {
                                continue;
                            }
                            let c = next.cell;
                            if !(table.free(c, t, train) && table.free(c, t + 1, train) && table.edge_free(p.cell, c, t, train)) {
                                continue;
                            }
                            let Some(a) = move_action(grid, p, next.heading) else { continue };
                            let arrives = c == entry.target;
                            succ.push((
                                Key {
                                    loc: Some(next),
                                    t: t + 1,
                                    acc: acc - den,
                                },
                                a,
                                arrives,
                            ));
                        }
                    }
                }
            }
        }
        for (nk, a, arrives) in succ {
            nodes.push(Node {
                key: nk,
                parent: id,
                action: a,
            });
            let nid = nodes.len() - 1;
            if arrives {
                // Expanded in f order with an admissible heuristic, so the first arrival popped is optimal;
                // arrivals are terminal, so accept on generation with a tie-safe check below.
                if goal.is_none_or(|(_, gt)| nk.t < gt) {
                    goal = Some((nid, nk.t));
                }
                continue;
            }
            if closed.contains(&nk) {
                continue;
            }
            if let Some(hv) = h(&nk) {
                open.push(Reverse((nk.t + hv, Reverse(nk.t), nid)));
            }
        }
        if let Some((_, gt)) = goal {
            // No open node can arrive earlier than its f value.
            if open.peek().is_none_or(|Reverse((f, _, _))| *f >= gt) {
                break;
            }
        }
    }

    let (gid, _) = goal?;
    let mut chain = Vec::new();
    let mut cur = gid;
    while nodes[cur].parent != usize::MAX {
        chain.push(cur);
        cur = nodes[cur].parent;
    }
    chain.reverse();
    let mut actions = Vec::with_capacity(chain.len());
    let mut poses = Vec::with_capacity(chain.len());
    for &n in &chain {
        actions.push(nodes[n].action);
        let loc = nodes[n].key.loc.filter(|p| p.cell != entry.target);
        poses.push(loc);
    }
    let arrival = nodes[gid].key.t;
    Some(SpaceTimePlan {
        train,
        start: t0,
        actions,
        poses,
        arrival: Some(arrival),
    })
}

fn move_action(grid: &crate::grid::RailGrid, p: Pose, exit: crate::grid::Heading) -> Option<RawAction> {
    if grid.trans(p.cell).exits(p.heading).len() == 1 {
        Some(RawAction::Forward)
    } else {
        RawAction::for_turn(p.heading, exit)
    }
}

/// A plan that keeps an on-map train where it is until the horizon.
fn hold_plan(world: &World, train: usize, t0: u32, pose: Pose) -> SpaceTimePlan {
    let n = world.t_max.saturating_sub(t0) as usize;
    SpaceTimePlan {
        train,
        start: t0,
        actions: vec![RawAction::Stop; n],
        poses: vec![Some(pose); n],
        arrival: None,
    }
}

fn book(table: &mut ReservationTable, plan: &SpaceTimePlan, initial: Option<Pose>, target: Cell) -> Result<()> {
    let clash = |h: usize| Error::train(plan.train, format!("reservation clash with train {h}"));
    if let Some(p) = initial {
        table.reserve(p.cell, plan.start, plan.train).map_err(clash)?;
    }
    let last = plan.actions.len().saturating_sub(1);
    let mut prev = initial;
    for (k, &loc) in plan.poses.iter().enumerate() {
        let t = plan.start + k as u32;
        // Arrival leaves the map, but the target cell is kept for one tick after entry.
        let cell = match loc {
            Some(p) => Some(p.cell),
            None if k == last && plan.arrival.is_some() && prev.is_some() => Some(target),
            None => None,
        };
        if let Some(c) = cell {
            table.reserve(c, t + 1, plan.train).map_err(clash)?;
            if let Some(q) = prev {
                if q.cell != c {
                    table.reserve_edge(q.cell, c, t, plan.train).map_err(clash)?;
                }
            }
        }
        prev = loc;
    }
    Ok(())
}

/// Sequential planning of every unfinished train from `state`.
///
/// Trains already on the map are planned before off-map ones because they
/// physically hold cells; within each group the priority order is kept. An
/// on-map train that cannot be planned is moved to the front and the pass is
/// repeated; if it fails again it is booked to hold its cell to the horizon
/// ahead of every other plan and the pass is repeated once more.
pub fn plan_from(world: &World, state: &SimState, order: &[usize]) -> Result<Vec<PlanOutcome>> {
    let n = world.n_trains();
    let t0 = state.clock;
    let on_map = |i: usize| state.trains[i].status == TrainStatus::Active;
    let mut seq: Vec<usize> = order.iter().copied().filter(|&i| on_map(i)).collect();
    seq.extend(order.iter().copied().filter(|&i| state.trains[i].status.is_off_map()));
    let mut bumped: HashSet<usize> = HashSet::new();
    let mut holds: Vec<usize> = Vec::new();
    'pass: loop {
        let mut table = ReservationTable::default();
        // Every on-map train owns its current cell now.
        for i in (0..n).filter(|&i| on_map(i)) {
            let p = state.trains[i].pose.expect("active");
            table.reserve(p.cell, t0, i).expect("occupancy is exclusive");
        }
        let mut out = vec![PlanOutcome::Cancelled; n];
        for &i in &holds {
            let pose = state.trains[i].pose.expect("active");
            let plan = hold_plan(world, i, t0, pose);
            book(&mut table, &plan, Some(pose), world.train(i).target)?;
            out[i] = PlanOutcome::Planned(plan);
        }
        for &i in &seq {
            let start = start_of(state, i);
            match plan_one(world, &table, i, t0, start) {
                Some(plan) => {
                    book(&mut table, &plan, start.loc, world.train(i).target)?;
                    out[i] = PlanOutcome::Planned(plan);
                }
                None if on_map(i) => {
                    seq.retain(|&j| j != i);
                    if bumped.insert(i) {
                        seq.insert(0, i);
                    } else {
                        holds.push(i);
                    }
                    continue 'pass;
                }
                None => {}
            }
        }
        return Ok(out);
    }
}

/// Plans every train of a fresh episode.
pub fn prioritized_plan(world: &World) -> Result<Vec<PlanOutcome>> {
    let state = world.reset(0);
    plan_from(world, &state, &priority_order(world))
}

/// Checks that no two plans book the same cell at the same time or swap cells.
pub fn validate_plans(plans: &[PlanOutcome]) -> std::result::Result<(), String> {
    let mut cells: HashMap<(Cell, u32), usize> = HashMap::new();
    let mut edges: HashMap<(Cell, Cell, u32), usize> = HashMap::new();
    for p in plans.iter().filter_map(|o| o.plan()) {
        let timed = p.timed_poses();
        for &(t, pose) in &timed {
            if let Some(h) = cells.insert((pose.cell, t), p.train) {
                return Err(format!("trains {h} and {} both hold {} at t={t}", p.train, pose.cell));
            }
        }
        for w in timed.windows(2) {
            let ((t, a), (_, b)) = (w[0], w[1]);
            if a.cell != b.cell {
                if let Some(h) = edges.get(&(b.cell, a.cell, t)) {
                    return Err(format!("trains {h} and {} swap {}/{} at t={t}", p.train, a.cell, b.cell));
                }
                edges.insert((a.cell, b.cell, t), p.train);
            }
        }
    }
    Ok(())
}

/// Executes plans in closed loop, replanning everything after a malfunction.
pub struct PpController {
    order: Vec<usize>,
    plans: Option<Vec<PlanOutcome>>,
    pending_replan: bool,
    pub replans: u32,
}

impl PpController {
    pub fn new(world: &World) -> Self {
        PpController {
            order: priority_order(world),
            plans: None,
            pending_replan: false,
            replans: 0,
        }
    }

    pub fn plans(&self) -> Option<&[PlanOutcome]> {
        self.plans.as_deref()
    }
}

impl Controller for PpController {
    fn name(&self) -> String {
        "pp".into()
    }

    fn act(&mut self, world: &World, state: &SimState) -> Result<JointAction> {
        if self.plans.is_none() || self.pending_replan {
            if self.plans.is_some() {
                self.replans += 1;
            }
            self.plans = Some(plan_from(world, state, &self.order)?);
            self.pending_replan = false;
        }
        let plans = self.plans.as_ref().expect("planned");
        Ok((0..world.n_trains())
            .map(|i| {
                if state.trains[i].status.is_terminal() {
                    RawAction::Noop
                } else {
                    plans[i].plan().map_or(RawAction::Noop, |p| p.action_at(state.clock))
                }
            })
            .collect())
    }

    fn observe(&mut self, _world: &World, state: &SimState, events: &StepEvents) -> Result<()> {
        if events.events.iter().any(|e| matches!(e, Event::MalfunctionStart { .. })) {
            self.pending_replan = true;
            return Ok(());
        }
        let Some(plans) = &self.plans else { return Ok(()) };
        for (i, t) in state.trains.iter().enumerate() {
            let Some(plan) = plans[i].plan() else { continue };
            let Some(expected) = plan.pose_at(state.clock) else { continue };
            let actual = if t.status == TrainStatus::Active { t.pose } else { None };
            if expected != actual {
                if t.is_malfunctioning() {
                    self.pending_replan = true;
                    continue;
                }
                return Err(Error::PlanDivergence {
                    tick: state.clock,
                    message: format!("train {i}: planned {expected:?}, actual {actual:?}"),
                });
            }
        }
        Ok(())
    }
}
