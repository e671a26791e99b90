//! Fixed-route deadlock avoidance.
//!
//! Every train keeps its shortest route. A train is dispatched only when no
//! train already on the map will traverse any edge of its route in the
//! opposite direction, so all committed routes agree on the direction of
//! every shared edge and head-on meetings cannot arise. On the map a train
//! stops at a decision point while an opposing train is on the stretch ahead.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use crate::control::{MadsAction, MadsPolicy, MapfAction, MapfPolicy, Query};
use crate::error::Result;
use crate::grid::{Cell, Pose};
use crate::obs::{outlook, sightings, DispatchObservation, RoutingObservation};
use crate::sim::TrainStatus;

#[derive(Debug, Clone, Copy)]
pub struct AvoidancePolicy;

fn route_edges(q: &Query, train: usize, from: Pose) -> Vec<(Cell, Cell)> {
    let grid = q.world.grid();
    let field = q.world.routes.field(grid, q.world.train(train).target);
    field
        .route_from(grid, from)
        .map(|r| r.poses.windows(2).map(|w| (w[0].cell, w[1].cell)).collect())
        .unwrap_or_default()
}

/// Edges still ahead of every train on the map.
fn committed(q: &Query) -> HashSet<(Cell, Cell)> {
    let mut out = HashSet::new();
    for (j, t) in q.state.trains.iter().enumerate() {
        if let (TrainStatus::Active, Some(p)) = (t.status, t.pose) {
            out.extend(route_edges(q, j, p));
        }
    }
    out
}

/// Dispatch iff the origin is free and no committed route opposes this train's route.
pub fn avoidance_mads(q: &Query) -> MadsAction {
    let entry = q.world.train(q.train);
    if q.tick.obs.occupancy.contains_key(&entry.origin.cell) {
        return MadsAction::Wait;
    }
    let mine = route_edges(q, q.train, entry.origin);
    let mut claims = q.tick.claims.borrow_mut();
    let claims = claims.get_or_insert_with(|| committed(q));
    if mine.iter().any(|&(a, b)| claims.contains(&(b, a))) {
        return MadsAction::Wait;
    }
    claims.extend(mine);
    MadsAction::Dispatch
}

/// Never deviates; holds at a decision point before a stretch with opposing traffic.
pub fn avoidance_mapf(q: &Query) -> MapfAction {
    let Some(pose) = q.state.trains[q.train].pose else {
        return MapfAction::Planned;
    };
    let Some(o) = outlook(q.world, pose, q.world.train(q.train).target) else {
        return MapfAction::Planned;
    };
    let upcoming: Vec<Cell> = match o.dp {
        Some(0) => o.shortest.poses.iter().map(|p| p.cell).collect(),
        Some(1) => std::iter::once(o.route.poses[1].cell)
            .chain(o.shortest.poses.iter().map(|p| p.cell))
            .collect(),
        _ => return MapfAction::Planned,
    };
    let seen = sightings(
        q.world,
        q.state,
        &q.tick.obs,
        q.train,
        pose.cell,
        upcoming.iter().enumerate().map(|(k, c)| (k as u32 + 1, *c)),
    );
    if seen.iter().any(|s| s.opposing) {
        MapfAction::Stop
    } else {
        MapfAction::Planned
    }
}

impl MadsPolicy for AvoidancePolicy {
    fn name(&self) -> String {
        "avoidance".into()
    }

    fn decide(&self, q: &Query, _obs: &DispatchObservation, _rng: &mut ChaCha8Rng) -> Result<MadsAction> {
        Ok(avoidance_mads(q))
    }
}

impl MapfPolicy for AvoidancePolicy {
    fn name(&self) -> String {
        "avoidance".into()
    }

    fn decide(&self, q: &Query, _obs: &RoutingObservation, _rng: &mut ChaCha8Rng) -> Result<MapfAction> {
        Ok(avoidance_mapf(q))
    }
}
