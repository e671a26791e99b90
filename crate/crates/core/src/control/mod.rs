//! Dispatch/routing decision layer.
//!
//! Off-map trains are handled by a dispatch (MADS) policy and on-map trains
//! by a routing (MAPF) policy. A decision controller skips every train that
//! has no real choice and substitutes the implied action.

pub mod dataset;
pub mod heuristics;
pub mod mcts;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Cell;
use crate::obs::{
    build_dispatch_obs, build_routing_obs, outlook, routing_mask, sightings, DispatchObservation, RoutingObservation,
    TickContext,
};
use crate::sim::{JointAction, RawAction, SimState, StepEvents, TrainStatus, World};

pub use heuristics::{GreedyPolicy, HeuristicMads, HeuristicMapf};
pub use mcts::{mcts_decide, MctsConfig, MctsPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MadsAction {
    Dispatch,
    Wait,
}

impl MadsAction {
    pub const ALL: [MadsAction; 2] = [MadsAction::Dispatch, MadsAction::Wait];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MapfAction {
    Planned,
    Deviate,
    Stop,
}

impl MapfAction {
    pub const ALL: [MapfAction; 3] = [MapfAction::Planned, MapfAction::Deviate, MapfAction::Stop];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    Mads(MadsAction),
    Mapf(MapfAction),
}

impl Decision {
    pub fn index(self) -> usize {
        match self {
            Decision::Mads(a) => a.index(),
            Decision::Mapf(a) => a.index(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dispatch,
    Routing,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Dispatch => "dispatch",
            Phase::Routing => "routing",
        })
    }
}

/// Facts computed once per tick and shared by every decision in it.
pub struct Tick {
    pub obs: TickContext,
    /// Directed cell pairs committed to by trains, filled lazily by policies that need it.
    pub claims: RefCell<Option<HashSet<(Cell, Cell)>>>,
}

impl Tick {
    pub fn new(world: &World, state: &SimState) -> Tick {
        Tick {
            obs: TickContext::new(world, state),
            claims: RefCell::new(None),
        }
    }
}

/// Everything a policy may look at when deciding for one train.
pub struct Query<'a> {
    pub world: &'a World,
    pub state: &'a SimState,
    pub tick: &'a Tick,
    pub train: usize,
}

pub trait MadsPolicy: Send + Sync {
    fn name(&self) -> String;
    fn decide(&self, q: &Query, obs: &DispatchObservation, rng: &mut ChaCha8Rng) -> Result<MadsAction>;
    fn priors(&self, _obs: &DispatchObservation) -> Option<[f64; 2]> {
        None
    }
}

pub trait MapfPolicy: Send + Sync {
    fn name(&self) -> String;
    fn decide(&self, q: &Query, obs: &RoutingObservation, rng: &mut ChaCha8Rng) -> Result<MapfAction>;
    fn priors(&self, _obs: &RoutingObservation) -> Option<[f64; 3]> {
        None
    }
}

/// Drives every train for one tick.
pub trait Controller: Send {
    fn name(&self) -> String;
    fn act(&mut self, world: &World, state: &SimState) -> Result<JointAction>;
    fn observe(&mut self, _world: &World, _state: &SimState, _events: &StepEvents) -> Result<()> {
        Ok(())
    }
}

/// False when the dispatch decision is skipped (implied Wait).
pub fn mads_mask(world: &World, state: &SimState, train: usize) -> bool {
    let t = &state.trains[train];
    let entry = world.train(train);
    if !t.status.is_off_map() || state.clock < entry.earliest_departure || t.is_malfunctioning() {
        return false;
    }
    let remaining = state.t_max.saturating_sub(state.clock);
    match world.routes.field(world.grid(), entry.target).distance(entry.origin) {
        Some(cost) => entry.speed.travel_ticks(cost) <= remaining,
        None => false,
    }
}

/// Whether a routing decision is needed, and the Planned/Deviate/Stop mask.
pub fn mapf_mask(world: &World, state: &SimState, tick: &TickContext, train: usize) -> (bool, [bool; 3]) {
    let t = &state.trains[train];
    let (TrainStatus::Active, Some(pose)) = (t.status, t.pose) else {
        return (false, [true, false, true]);
    };
    let Some(o) = outlook(world, pose, world.train(train).target) else {
        return (false, [true, false, true]);
    };
    let entering = o.dp == Some(1);
    let opposing = sightings(world, state, tick, train, pose.cell, o.lead().iter().enumerate().map(|(k, p)| (k as u32 + 1, p.cell)))
        .iter()
        .any(|s| s.opposing);
    (o.at_dp || entering || opposing, routing_mask(world, state, train, &o))
}

/// Raw action realising a high-level decision for `train` in `state`.
pub fn translate(world: &World, state: &SimState, train: usize, d: Decision) -> Result<RawAction> {
    match d {
        Decision::Mads(MadsAction::Dispatch) => Ok(RawAction::Forward),
        Decision::Mads(MadsAction::Wait) => Ok(RawAction::Noop),
        Decision::Mapf(MapfAction::Stop) => Ok(RawAction::Stop),
        Decision::Mapf(a) => {
            let pose = state.trains[train]
                .pose
                .ok_or_else(|| Error::train(train, "routing action for an off-map train"))?;
            let grid = world.grid();
            let exits = grid.trans(pose.cell).exits(pose.heading);
            if exits.len() == 1 && a == MapfAction::Planned {
                return Ok(RawAction::Forward);
            }
            let ranked = world.routes.field(grid, world.train(train).target).ranked_exits(grid, pose);
            let rank = if a == MapfAction::Planned { 0 } else { 1 };
            let (h, _) = *ranked
                .get(rank)
                .ok_or_else(|| Error::train(train, format!("no route for {a:?} from {}", pose.cell)))?;
            RawAction::for_turn(pose.heading, h).ok_or_else(|| Error::train(train, "exit is not a forward turn"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tick: u32,
    pub train: usize,
    pub phase: Phase,
    pub obs: Vec<f32>,
    pub action: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub skip: bool,
    /// Candidate routes per off-map train.
    pub k: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { skip: true, k: 2 }
    }
}

/// The two-level controller: one dispatch and one routing policy.
pub struct HierarchicalController {
    pub mads: Box<dyn MadsPolicy>,
    pub mapf: Box<dyn MapfPolicy>,
    pub config: ControllerConfig,
    rng: ChaCha8Rng,
    record: bool,
    pub decisions: Vec<DecisionRecord>,
    /// Policy queries per phase, for skip accounting.
    pub queries: [u64; 2],
}

impl HierarchicalController {
    pub fn new(mads: Box<dyn MadsPolicy>, mapf: Box<dyn MapfPolicy>, config: ControllerConfig, seed: u64) -> Self {
        HierarchicalController {
            mads,
            mapf,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            record: false,
            decisions: Vec::new(),
            queries: [0, 0],
        }
    }

    pub fn heuristic(conflict_window: u32, stop_window: u32) -> Self {
        HierarchicalController::new(
            Box::new(HeuristicMads { window: conflict_window }),
            Box::new(HeuristicMapf { stop_window }),
            ControllerConfig::default(),
            0,
        )
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    /// Decision for one train, or `None` when it is skipped.
    pub fn decide(&mut self, world: &World, state: &SimState, tick: &Tick, train: usize) -> Result<Option<Decision>> {
        let q = Query {
            world,
            state,
            tick,
            train,
        };
        let status = state.trains[train].status;
        if status.is_off_map() {
            if self.config.skip && !mads_mask(world, state, train) {
                return Ok(None);
            }
            let obs = build_dispatch_obs(world, state, train, self.config.k)?;
            self.queries[0] += 1;
            let a = self.mads.decide(&q, &obs, &mut self.rng)?;
            if self.record {
                self.decisions.push(DecisionRecord {
                    tick: state.clock,
                    train,
                    phase: Phase::Dispatch,
                    obs: obs.flat(),
                    action: a.index(),
                });
            }
            Ok(Some(Decision::Mads(a)))
        } else if status == TrainStatus::Active {
            let (needed, mask) = mapf_mask(world, state, &tick.obs, train);
            if self.config.skip && !needed {
                return Ok(None);
            }
            let obs = build_routing_obs(world, state, &tick.obs, train)?;
            self.queries[1] += 1;
            let a = self.mapf.decide(&q, &obs, &mut self.rng)?;
            if !mask[a.index()] {
                return Err(Error::train(train, format!("policy {} chose masked {a:?}", self.mapf.name())));
            }
            if self.record {
                self.decisions.push(DecisionRecord {
                    tick: state.clock,
                    train,
                    phase: Phase::Routing,
                    obs: obs.flat(),
                    action: a.index(),
                });
            }
            Ok(Some(Decision::Mapf(a)))
        } else {
            Ok(None)
        }
    }
}

/// Implied action for a skipped train.
pub fn implied(state: &SimState, train: usize) -> Option<Decision> {
    match state.trains[train].status {
        TrainStatus::Active => Some(Decision::Mapf(MapfAction::Planned)),
        s if s.is_off_map() => Some(Decision::Mads(MadsAction::Wait)),
        _ => None,
    }
}

/// One pass of the control loop: every train is routed to exactly one policy by status.
pub fn control_step(world: &World, state: &SimState, controller: &mut HierarchicalController) -> Result<JointAction> {
    let tick = Tick::new(world, state);
    let mut joint = vec![RawAction::Noop; world.n_trains()];
    for (i, slot) in joint.iter_mut().enumerate() {
        let d = match controller.decide(world, state, &tick, i)? {
            Some(d) => Some(d),
            None => implied(state, i),
        };
        if let Some(d) = d {
            *slot = translate(world, state, i, d)?;
        }
    }
    Ok(joint)
}

impl Controller for HierarchicalController {
    fn name(&self) -> String {
        format!("{}+{}", self.mads.name(), self.mapf.name())
    }

    fn act(&mut self, world: &World, state: &SimState) -> Result<JointAction> {
        control_step(world, state, self)
    }
}

/// Applies a high-level action through the masks: masked routing choices become STOP,
/// masked dispatches NOOP.
pub fn masked_raw(world: &World, state: &SimState, tick: &TickContext, train: usize, d: Decision) -> Result<RawAction> {
    match d {
        Decision::Mapf(a) => {
            let (_, mask) = mapf_mask(world, state, tick, train);
            if !mask[a.index()] {
                return Ok(RawAction::Stop);
            }
        }
        Decision::Mads(MadsAction::Dispatch) if !mads_mask(world, state, train) => return Ok(RawAction::Noop),
        Decision::Mads(_) => {}
    }
    translate(world, state, train, d)
}

/// Controller presets by name.
pub const CONTROLLERS: [&str; 7] = ["full", "greedy", "mads-greedy", "greedy-mapf", "deadlock-avoidance", "pp", "mcts"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub conflict_window: u32,
    pub stop_window: u32,
    pub k: usize,
    pub mcts: MctsConfig,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            conflict_window: 10,
            stop_window: 5,
            k: 2,
            mcts: MctsConfig::default(),
        }
    }
}

/// Builds a named hierarchical controller. `pp` is not hierarchical and is built by the baselines module.
pub fn hierarchical(name: &str, p: &ControlParams, seed: u64) -> Result<HierarchicalController> {
    let hm = || -> Box<dyn MadsPolicy> { Box::new(HeuristicMads { window: p.conflict_window }) };
    let hr = || -> Box<dyn MapfPolicy> { Box::new(HeuristicMapf { stop_window: p.stop_window }) };
    let (mads, mapf): (Box<dyn MadsPolicy>, Box<dyn MapfPolicy>) = match name {
        "full" => (hm(), hr()),
        "greedy" => (Box::new(GreedyPolicy), Box::new(GreedyPolicy)),
        "mads-greedy" => (hm(), Box::new(GreedyPolicy)),
        "greedy-mapf" => (Box::new(GreedyPolicy), hr()),
        "deadlock-avoidance" => (
            Box::new(crate::baselines::avoidance::AvoidancePolicy),
            Box::new(crate::baselines::avoidance::AvoidancePolicy),
        ),
        "mcts" => (Box::new(MctsPolicy::new(p.mcts, *p)), Box::new(MctsPolicy::new(p.mcts, *p))),
        other => return Err(Error::InvalidParameter(format!("unknown controller '{other}'"))),
    };
    let config = ControllerConfig { skip: true, k: p.k };
    Ok(HierarchicalController::new(mads, mapf, config, seed))
}
