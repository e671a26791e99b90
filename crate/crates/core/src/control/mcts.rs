//! Tree search over one train's decisions with heuristic co-players and rollouts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::{build_dispatch_obs, build_routing_obs, DispatchObservation, RoutingObservation};
use crate::path::detect_deadlocks;
use crate::sim::{SimState, TrainStatus, World};

use super::heuristics::{heuristic_mads, heuristic_mapf, soft_prior};
use super::{
    implied, mads_mask, mapf_mask, translate, ControlParams, Decision, HierarchicalController, MadsAction, MadsPolicy,
    MapfAction, MapfPolicy, Query, Tick,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub budget: usize,
    /// Ticks simulated beyond the root, tree and rollout together.
    pub depth: u32,
    pub c: f64,
    pub lambda_deadlock: f64,
    pub lambda_delay: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            budget: 100,
            depth: 40,
            c: 1.4,
            lambda_deadlock: 1.0,
            lambda_delay: 0.1,
        }
    }
}

impl MctsConfig {
    fn check(&self) -> Result<()> {
        if self.budget == 0 || self.depth == 0 {
            return Err(Error::InvalidParameter("mcts budget and depth must be at least 1".into()));
        }
        if self.lambda_deadlock < 0.0 || self.lambda_delay < 0.0 || self.c < 0.0 {
            return Err(Error::InvalidParameter("mcts weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsResult {
    pub action: Decision,
    pub actions: Vec<Decision>,
    pub visits: Vec<u32>,
    pub values: Vec<f64>,
}

struct Node {
    state: SimState,
    terminal: bool,
    actions: Vec<Decision>,
    priors: Vec<f64>,
    children: Vec<Option<usize>>,
    n: Vec<u32>,
    w: Vec<f64>,
    visits: u32,
}

/// Legal decisions and their priors for `train` in `state`, if it must decide.
fn options(world: &World, state: &SimState, train: usize, params: &ControlParams) -> Result<Option<(Vec<Decision>, Vec<f64>)>> {
    let status = state.trains[train].status;
    if status.is_off_map() {
        if !mads_mask(world, state, train) {
            return Ok(None);
        }
        let obs = build_dispatch_obs(world, state, train, params.k)?;
        let p = soft_prior(heuristic_mads(&obs, params.conflict_window).index(), &[true, true]);
        Ok(Some((MadsAction::ALL.iter().map(|a| Decision::Mads(*a)).collect(), p.to_vec())))
    } else if status == TrainStatus::Active {
        let tick = Tick::new(world, state);
        let (needed, mask) = mapf_mask(world, state, &tick.obs, train);
        if !needed {
            return Ok(None);
        }
        let obs = build_routing_obs(world, state, &tick.obs, train)?;
        let p = soft_prior(heuristic_mapf(&obs, mask, params.stop_window).index(), &mask);
        let mut acts = Vec::new();
        let mut pri = Vec::new();
        for a in MapfAction::ALL {
            if mask[a.index()] {
                acts.push(Decision::Mapf(a));
                pri.push(p[a.index()]);
            }
        }
        Ok(Some((acts, pri)))
    } else {
        Ok(None)
    }
}

/// Return of a (possibly unfinished) episode state.
pub fn rollout_return(world: &World, state: &SimState, cfg: &MctsConfig) -> f64 {
    let n = world.n_trains().max(1) as f64;
    let arrived = state.trains.iter().filter(|t| t.status == TrainStatus::Arrived).count() as f64;
    let deadlocked = detect_deadlocks(world.grid(), state).len() as f64;
    let now = state.clock;
    let mut delay = 0.0;
    for (i, t) in state.trains.iter().enumerate() {
        if t.status == TrainStatus::CancelledAtEnd {
            continue;
        }
        let actual = t.arrived_at.unwrap_or(now);
        delay += actual.saturating_sub(world.train(i).scheduled_arrival) as f64 / state.t_max.max(1) as f64;
    }
    arrived / n - cfg.lambda_deadlock * deadlocked / n - cfg.lambda_delay * delay / n
}

struct Search<'a> {
    world: &'a World,
    train: usize,
    cfg: MctsConfig,
    params: ControlParams,
    horizon: u32,
    players: HierarchicalController,
    nodes: Vec<Node>,
}

impl Search<'_> {
    fn done(&self, s: &SimState) -> bool {
        s.finished || s.clock >= self.horizon
    }

    /// One tick with the co-players, optionally forcing the decider's action.
    fn tick(&mut self, s: &mut SimState, forced: Option<Decision>) -> Result<()> {
        let tick = Tick::new(self.world, s);
        let mut joint = vec![crate::sim::RawAction::Noop; self.world.n_trains()];
        for (i, slot) in joint.iter_mut().enumerate() {
            let d = match forced {
                Some(d) if i == self.train => Some(d),
                _ => self.players.decide(self.world, s, &tick, i)?.or_else(|| implied(s, i)),
            };
            if let Some(d) = d {
                *slot = translate(self.world, s, i, d)?;
            }
        }
        self.world.step(s, &joint)?;
        Ok(())
    }

    fn make_node(&self, state: SimState) -> Result<Node> {
        let opts = if self.done(&state) {
            None
        } else {
            options(self.world, &state, self.train, &self.params)?
        };
        let (actions, priors) = opts.unwrap_or_default();
        let k = actions.len();
        Ok(Node {
            terminal: k == 0,
            state,
            actions,
            priors,
            children: vec![None; k],
            n: vec![0; k],
            w: vec![0.0; k],
            visits: 0,
        })
    }

    /// Advances until the decider faces its next choice or the search horizon.
    fn advance(&mut self, mut s: SimState, first: Decision) -> Result<SimState> {
        self.tick(&mut s, Some(first))?;
        while !self.done(&s) && options(self.world, &s, self.train, &self.params)?.is_none() {
            self.tick(&mut s, None)?;
        }
        Ok(s)
    }

    fn rollout(&mut self, mut s: SimState) -> Result<f64> {
        while !self.done(&s) {
            self.tick(&mut s, None)?;
        }
        Ok(rollout_return(self.world, &s, &self.cfg))
    }

    fn select(&self, id: usize) -> usize {
        let node = &self.nodes[id];
        let sqrt_n = (node.visits.max(1) as f64).sqrt();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..node.actions.len() {
            let q = if node.n[a] > 0 { node.w[a] / node.n[a] as f64 } else { 0.0 };
            let u = q + self.cfg.c * node.priors[a] * sqrt_n / (1.0 + node.n[a] as f64);
            if u > best_score {
                best_score = u;
                best = a;
            }
        }
        best
    }

    fn simulate(&mut self) -> Result<()> {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut id = 0;
        let value = loop {
            if self.nodes[id].terminal {
                break rollout_return(self.world, &self.nodes[id].state, &self.cfg);
            }
            let a = self.select(id);
            path.push((id, a));
            match self.nodes[id].children[a] {
                Some(child) => id = child,
                None => {
                    let s = self.nodes[id].state.clone();
                    let next = self.advance(s, self.nodes[id].actions[a])?;
                    let node = self.make_node(next.clone())?;
                    self.nodes.push(node);
                    let child = self.nodes.len() - 1;
                    self.nodes[id].children[a] = Some(child);
                    break self.rollout(next)?;
                }
            }
        };
        for (id, a) in path {
            let node = &mut self.nodes[id];
            node.visits += 1;
            node.n[a] += 1;
            node.w[a] += value;
        }
        Ok(())
    }
}

/// Runs `cfg.budget` simulations from `state` for `train` and returns the most visited root action.
pub fn mcts_decide(world: &World, state: &SimState, train: usize, cfg: &MctsConfig, params: &ControlParams) -> Result<MctsResult> {
    cfg.check()?;
    let players = HierarchicalController::heuristic(params.conflict_window, params.stop_window);
    let mut search = Search {
        world,
        train,
        cfg: *cfg,
        params: *params,
        horizon: (state.clock + cfg.depth).min(state.t_max),
        players,
        nodes: Vec::new(),
    };
    let root = search.make_node(state.clone())?;
    if root.terminal {
        return Err(Error::train(train, "no decision to search from this state"));
    }
    search.nodes.push(root);
    for _ in 0..cfg.budget {
        search.simulate()?;
    }
    let root = &search.nodes[0];
    // Most visits; ties go to the earlier action in declaration order.
    let best = (0..root.actions.len())
        .max_by_key(|&a| (root.n[a], std::cmp::Reverse(root.actions[a])))
        .expect("root has actions");
    Ok(MctsResult {
        action: root.actions[best],
        actions: root.actions.clone(),
        visits: root.n.clone(),
        values: (0..root.actions.len())
            .map(|a| if root.n[a] > 0 { root.w[a] / root.n[a] as f64 } else { 0.0 })
            .collect(),
    })
}

/// Tree search used as both dispatch and routing policy.
#[derive(Debug, Clone, Copy)]
pub struct MctsPolicy {
    pub config: MctsConfig,
    pub params: ControlParams,
}

impl MctsPolicy {
    pub fn new(config: MctsConfig, params: ControlParams) -> Self {
        MctsPolicy { config, params }
    }
}

impl MadsPolicy for MctsPolicy {
    fn name(&self) -> String {
        format!("mcts{}", self.config.budget)
    }

    fn decide(&self, q: &Query, _obs: &DispatchObservation, _rng: &mut ChaCha8Rng) -> Result<MadsAction> {
        match mcts_decide(q.world, q.state, q.train, &self.config, &self.params)?.action {
            Decision::Mads(a) => Ok(a),
            other => Err(Error::train(q.train, format!("search returned {other:?} in dispatch phase"))),
        }
    }
}

impl MapfPolicy for MctsPolicy {
    fn name(&self) -> String {
        format!("mcts{}", self.config.budget)
    }

    fn decide(&self, q: &Query, _obs: &RoutingObservation, _rng: &mut ChaCha8Rng) -> Result<MapfAction> {
        match mcts_decide(q.world, q.state, q.train, &self.config, &self.params)?.action {
            Decision::Mapf(a) => Ok(a),
            other => Err(Error::train(q.train, format!("search returned {other:?} in routing phase"))),
        }
    }
}
