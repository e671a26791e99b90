//! Rule-based and greedy policies.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::obs::{layout, DispatchObservation, RoutingObservation};

use super::{MadsAction, MadsPolicy, MapfAction, MapfPolicy, Query};

/// Waits while any candidate route overlaps an active train's route within `window` steps.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicMads {
    pub window: u32,
}

pub fn heuristic_mads(obs: &DispatchObservation, window: u32) -> MadsAction {
    let immediate = obs
        .conflicts
        .iter()
        .any(|c| c.n_conflict_cells > 0 && c.dist_self.min(c.dist_other) <= window);
    if immediate {
        MadsAction::Wait
    } else {
        MadsAction::Dispatch
    }
}

impl MadsPolicy for HeuristicMads {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn decide(&self, _q: &Query, obs: &DispatchObservation, _rng: &mut ChaCha8Rng) -> Result<MadsAction> {
        Ok(heuristic_mads(obs, self.window))
    }

    fn priors(&self, obs: &DispatchObservation) -> Option<[f64; 2]> {
        Some(soft_prior(heuristic_mads(obs, self.window).index(), &[true, true]))
    }
}

/// Avoids opposing traffic on the planned branch by deviating or stopping.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicMapf {
    pub stop_window: u32,
}

pub fn heuristic_mapf(obs: &RoutingObservation, mask: [bool; 3], stop_window: u32) -> MapfAction {
    let r = &obs.rows[0];
    let s = layout::SHORTEST.start;
    let a = layout::ALTERNATIVE.start;
    let opposing = r[s + layout::BR_CONFLICT_OPPOSING] > 0.5;
    let deadlock = r[s + layout::BR_DEADLOCK] > 0.5;
    let alt_clean = mask[1]
        && r[a + layout::BR_EXISTS] > 0.5
        && r[a + layout::BR_CONFLICT_OPPOSING] < 0.5
        && r[a + layout::BR_DEADLOCK] < 0.5;
    if (opposing || deadlock) && alt_clean {
        return MapfAction::Deviate;
    }
    let near = obs.steps(s + layout::BR_DIST_CONFLICT) <= stop_window;
    if opposing && near {
        return MapfAction::Stop;
    }
    MapfAction::Planned
}

impl MapfPolicy for HeuristicMapf {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn decide(&self, _q: &Query, obs: &RoutingObservation, _rng: &mut ChaCha8Rng) -> Result<MapfAction> {
        Ok(heuristic_mapf(obs, obs.mask, self.stop_window))
    }

    fn priors(&self, obs: &RoutingObservation) -> Option<[f64; 3]> {
        Some(soft_prior(heuristic_mapf(obs, obs.mask, self.stop_window).index(), &obs.mask))
    }
}

/// Three quarters of the mass on the preferred action, the rest spread over the other legal ones.
pub(crate) fn soft_prior<const N: usize>(preferred: usize, mask: &[bool; N]) -> [f64; N] {
    let others = mask.iter().enumerate().filter(|&(i, &m)| m && i != preferred).count();
    let mut p = [0.0; N];
    if others == 0 {
        p[preferred] = 1.0;
        return p;
    }
    p[preferred] = 0.75;
    for (i, &m) in mask.iter().enumerate() {
        if m && i != preferred {
            p[i] = 0.25 / others as f64;
        }
    }
    p
}

/// Dispatches whenever allowed and always follows the shortest route.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy;

impl MadsPolicy for GreedyPolicy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn decide(&self, _q: &Query, _obs: &DispatchObservation, _rng: &mut ChaCha8Rng) -> Result<MadsAction> {
        Ok(MadsAction::Dispatch)
    }
}

impl MapfPolicy for GreedyPolicy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn decide(&self, _q: &Query, _obs: &RoutingObservation, _rng: &mut ChaCha8Rng) -> Result<MapfAction> {
        Ok(MapfAction::Planned)
    }
}
