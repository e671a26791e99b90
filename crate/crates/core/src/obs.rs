//! Dispatch and routing observations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, Heading, Pose};
use crate::path::{detect_deadlocks, project_conflicts, ConflictProjection, DistanceField, Route};
use crate::sim::{SimState, TrainStatus, World};

pub const LAYOUT_VERSION: &str = "railflow-obs-v1";
pub const ROW: usize = 53;
pub const GLOBAL: usize = 5;

/// Named offsets into a routing row.
pub mod layout {
    use std::ops::Range;

    pub const STATUS: Range<usize> = 0..8;
    pub const SEGMENT: Range<usize> = 8..14;
    pub const SHORTEST: Range<usize> = 14..26;
    pub const ALTERNATIVE: Range<usize> = 26..38;
    pub const BEYOND_SHORTEST: Range<usize> = 38..44;
    pub const BEYOND_ALTERNATIVE: Range<usize> = 44..50;
    pub const PADDING: Range<usize> = 50..53;

    pub const VALID: usize = 0;
    pub const IS_SELF: usize = 1;
    pub const ON_MAP: usize = 2;
    pub const MALFUNCTIONING: usize = 3;
    pub const MALFUNCTION_LEFT: usize = 4;
    pub const DIST_TARGET: usize = 5;
    pub const TIME_LEFT: usize = 6;
    pub const AT_DP: usize = 7;

    pub const SEG_STEPS_TO_DP: usize = 8;
    pub const SEG_TRAINS_AHEAD: usize = 9;
    pub const SEG_OPPOSING: usize = 10;
    pub const SEG_DIST_OPPOSING: usize = 11;
    pub const SEG_DIST_SAME: usize = 12;
    pub const SEG_DP_BRANCHES: usize = 13;

    // Offsets inside a branch block.
    pub const BR_EXISTS: usize = 0;
    pub const BR_STEPS_TARGET: usize = 1;
    pub const BR_STEPS_DP: usize = 2;
    pub const BR_DEADLOCK: usize = 3;
    pub const BR_DIST_DEADLOCK: usize = 4;
    pub const BR_CONFLICTS: usize = 5;
    pub const BR_DIST_CONFLICT: usize = 6;
    pub const BR_CONFLICT_OPPOSING: usize = 7;
    pub const BR_TARGET: usize = 8;
    pub const BR_USABLE: usize = 9;
    pub const BR_OCCUPANCY: usize = 10;
    pub const BR_MALFUNCTION: usize = 11;

    // Offsets inside a beyond-DP block.
    pub const BY_DEADLOCK: usize = 0;
    pub const BY_DIST_DEADLOCK: usize = 1;
    pub const BY_MIN_COST: usize = 2;
    pub const BY_MAX_COST: usize = 3;
    pub const BY_SUB_BRANCHES: usize = 4;
    pub const BY_TARGET_REACHABLE: usize = 5;

    pub const BIAS: usize = 50;
    pub const DEPTH: usize = 51;
    pub const RESERVED: usize = 52;

    const BRANCH_NAMES: [&str; 12] = [
        "exists",
        "steps_to_target",
        "steps_to_branch_dp",
        "deadlock",
        "dist_deadlock",
        "conflicting_trains",
        "dist_first_conflict",
        "first_conflict_opposing",
        "target_on_branch",
        "usable",
        "occupancy",
        "malfunction_on_branch",
    ];
    const BEYOND_NAMES: [&str; 6] = [
        "any_deadlock",
        "min_dist_deadlock",
        "min_travel_cost",
        "max_travel_cost",
        "sub_branches",
        "target_reachable",
    ];

    pub fn names() -> Vec<String> {
        let mut v: Vec<String> = [
            "valid",
            "is_self",
            "on_map",
            "malfunctioning",
            "malfunction_left",
            "dist_target",
            "time_left",
            "at_dp",
            "seg_steps_to_dp",
            "seg_trains_ahead",
            "seg_opposing",
            "seg_dist_opposing",
            "seg_dist_same",
            "seg_dp_branches",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for p in ["shortest", "alternative"] {
            v.extend(BRANCH_NAMES.iter().map(|n| format!("{p}.{n}")));
        }
        for p in ["beyond_shortest", "beyond_alternative"] {
            v.extend(BEYOND_NAMES.iter().map(|n| format!("{p}.{n}")));
        }
        v.extend(["bias", "depth", "reserved"].iter().map(|s| s.to_string()));
        v
    }
}

/// Per-tick facts shared by every observation built in that tick.
#[derive(Debug, Clone)]
pub struct TickContext {
    pub occupancy: HashMap<Cell, usize>,
    pub deadlocked: BTreeSet<usize>,
}

impl TickContext {
    pub fn new(world: &World, state: &SimState) -> TickContext {
        TickContext {
            occupancy: state.occupancy(),
            deadlocked: detect_deadlocks(world.grid(), state),
        }
    }
}

/// Route continuation through one exit of the decision pose.
#[derive(Debug, Clone)]
pub struct Branch {
    pub exit: Option<Heading>,
    /// Poses after the decision pose up to the next decision point or the target.
    pub poses: Vec<Pose>,
    /// Steps from the train to `poses[0]`.
    pub offset: u32,
    /// Steps from the train to its target through this branch.
    pub cost: u32,
    pub ends_at_dp: bool,
}

/// A train's shortest route split at its next decision point.
#[derive(Debug, Clone)]
pub struct Outlook {
    pub route: Route,
    pub dp: Option<usize>,
    pub at_dp: bool,
    pub shortest: Branch,
    pub alternative: Option<Branch>,
}

impl Outlook {
    pub fn lead(&self) -> &[Pose] {
        let end = self.dp.unwrap_or(self.route.poses.len() - 1);
        &self.route.poses[1..=end]
    }

    pub fn dp_pose(&self) -> Option<Pose> {
        self.dp.map(|j| self.route.poses[j])
    }

    pub fn branch(&self, alt: bool) -> Option<&Branch> {
        if alt {
            self.alternative.as_ref()
        } else {
            Some(&self.shortest)
        }
    }
}

fn is_dp(world: &World, pose: Pose) -> bool {
    world.grid().successors(pose).count() >= 2
}

fn follow_branch(world: &World, field: &DistanceField, start: Pose, offset: u32) -> Branch {
    let grid = world.grid();
    let mut poses = vec![start];
    let mut cur = start;
    while cur.cell != field.target() && !is_dp(world, cur) {
        let Some(h) = field.best_exit(grid, cur) else { break };
        cur = Pose::new(grid.neighbour(cur.cell, h).expect("valid exit"), h);
        poses.push(cur);
    }
    let ends_at_dp = cur.cell != field.target() && is_dp(world, cur);
    Branch {
        exit: Some(start.heading),
        poses,
        offset,
        cost: offset + field.distance(start).unwrap_or(0),
        ends_at_dp,
    }
}

pub fn outlook(world: &World, pose: Pose, target: Cell) -> Option<Outlook> {
    let grid = world.grid();
    let field = world.routes.field(grid, target);
    let route = field.route_from(grid, pose)?;
    let end = route.poses.len() - 1;
    let dp = (0..end).find(|&j| is_dp(world, route.poses[j]));
    let (shortest, alternative) = match dp {
        None => (
            Branch {
                exit: None,
                poses: Vec::new(),
                offset: end as u32,
                cost: route.cost(),
                ends_at_dp: false,
            },
            None,
        ),
        Some(j) => {
            let d = route.poses[j];
            let ranked = field.ranked_exits(grid, d);
            let start = |h: Heading| Pose::new(grid.neighbour(d.cell, h).expect("valid exit"), h);
            let offset = j as u32 + 1;
            let shortest = follow_branch(world, &field, start(ranked[0].0), offset);
            let alternative = ranked.get(1).map(|&(h, _)| follow_branch(world, &field, start(h), offset));
            (shortest, alternative)
        }
    };
    Some(Outlook {
        at_dp: is_dp(world, pose),
        route,
        dp,
        shortest,
        alternative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sighting {
    pub train: usize,
    pub dist: u32,
    pub opposing: bool,
}

/// Other active trains met walking `cells` outward from `from`.
pub fn sightings(
    world: &World,
    state: &SimState,
    ctx: &TickContext,
    subject: usize,
    from: Cell,
    poses: impl IntoIterator<Item = (u32, Cell)>,
) -> Vec<Sighting> {
    let grid = world.grid();
    let mut prev = from;
    let mut out = Vec::new();
    for (dist, cell) in poses {
        if let Some(&j) = ctx.occupancy.get(&cell) {
            if j != subject {
                let pose = state.trains[j].pose.expect("occupant is on the map");
                let opposing = grid.successors(pose).any(|s| s.cell == prev);
                out.push(Sighting { train: j, dist, opposing });
            }
        }
        prev = cell;
    }
    out
}

fn lead_cells(o: &Outlook) -> Vec<(u32, Cell)> {
    o.lead().iter().enumerate().map(|(k, p)| (k as u32 + 1, p.cell)).collect()
}

fn branch_cells(b: &Branch) -> Vec<(u32, Cell)> {
    b.poses.iter().enumerate().map(|(k, p)| (b.offset + k as u32, p.cell)).collect()
}

/// Lead segment followed by the branch.
pub fn scan_path(o: &Outlook, alt: bool) -> Vec<(u32, Cell)> {
    let mut v = lead_cells(o);
    if let Some(b) = o.branch(alt) {
        v.extend(branch_cells(b));
    }
    v
}

/// Whether the alternative branch can still deliver the train in time.
pub fn alternative_viable(world: &World, state: &SimState, train: usize, o: &Outlook) -> bool {
    let remaining = state.t_max.saturating_sub(state.clock);
    match &o.alternative {
        Some(b) => world.train(train).speed.travel_ticks(b.cost) <= remaining,
        None => false,
    }
}

/// Planned / Deviate / Stop availability for a train standing at `o`.
pub fn routing_mask(world: &World, state: &SimState, train: usize, o: &Outlook) -> [bool; 3] {
    [true, o.at_dp && alternative_viable(world, state, train, o), true]
}

fn norm(v: u32, bound: u32) -> f32 {
    if bound == 0 {
        0.0
    } else {
        (v.min(bound) as f32) / bound as f32
    }
}

fn dist_or_sentinel(d: Option<u32>, t_max: u32) -> f32 {
    d.map_or(1.0, |d| norm(d, t_max))
}

struct RowBuilder<'a> {
    world: &'a World,
    state: &'a SimState,
    ctx: &'a TickContext,
    t_max: u32,
    n_total: u32,
}

impl RowBuilder<'_> {
    fn row(&self, train: usize, depth: u32) -> [f32; ROW] {
        let mut r = [0.0f32; ROW];
        let t = &self.state.trains[train];
        let Some(pose) = t.pose else { return r };
        let target = self.world.train(train).target;
        let Some(o) = outlook(self.world, pose, target) else { return r };
        let tm = self.t_max;
        let remaining = tm.saturating_sub(self.state.clock);

        r[layout::VALID] = 1.0;
        r[layout::IS_SELF] = (depth == 0) as u8 as f32;
        r[layout::ON_MAP] = 1.0;
        r[layout::MALFUNCTIONING] = t.is_malfunctioning() as u8 as f32;
        r[layout::MALFUNCTION_LEFT] = norm(t.malfunction, 50);
        r[layout::DIST_TARGET] = norm(o.route.cost(), tm);
        r[layout::TIME_LEFT] = norm(remaining, tm);
        r[layout::AT_DP] = o.at_dp as u8 as f32;

        let lead = sightings(self.world, self.state, self.ctx, train, pose.cell, lead_cells(&o));
        r[layout::SEG_STEPS_TO_DP] = o.dp.map_or(1.0, |j| norm(j as u32, tm));
        r[layout::SEG_TRAINS_AHEAD] = norm(lead.len() as u32, self.n_total);
        r[layout::SEG_OPPOSING] = lead.iter().any(|s| s.opposing) as u8 as f32;
        r[layout::SEG_DIST_OPPOSING] = dist_or_sentinel(lead.iter().find(|s| s.opposing).map(|s| s.dist), tm);
        r[layout::SEG_DIST_SAME] = dist_or_sentinel(lead.iter().find(|s| !s.opposing).map(|s| s.dist), tm);
        r[layout::SEG_DP_BRANCHES] = o
            .dp_pose()
            .map_or(0.0, |d| norm(self.world.grid().successors(d).count() as u32, 3));

        let mask = routing_mask(self.world, self.state, train, &o);
        for (alt, block, beyond) in [
            (false, layout::SHORTEST, layout::BEYOND_SHORTEST),
            (true, layout::ALTERNATIVE, layout::BEYOND_ALTERNATIVE),
        ] {
            let Some(b) = o.branch(alt) else { continue };
            let usable = if alt { mask[1] } else { mask[0] };
            self.branch_block(&mut r[block], train, pose.cell, &o, b, target, usable);
            self.beyond_block(&mut r[beyond], b, target);
        }

        r[layout::BIAS] = 1.0;
        r[layout::DEPTH] = depth.min(1) as f32;
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_block(&self, out: &mut [f32], train: usize, from: Cell, o: &Outlook, b: &Branch, target: Cell, usable: bool) {
        let tm = self.t_max;
        let mut cells = lead_cells(o);
        cells.extend(branch_cells(b));
        let seen = sightings(self.world, self.state, self.ctx, train, from, cells.iter().copied());
        let on_branch = sightings(
            self.world,
            self.state,
            self.ctx,
            train,
            o.dp_pose().map_or(from, |d| d.cell),
            branch_cells(b),
        );
        let deadlock = seen.iter().find(|s| self.ctx.deadlocked.contains(&s.train));
        out[layout::BR_EXISTS] = 1.0;
        out[layout::BR_STEPS_TARGET] = norm(b.cost, tm);
        out[layout::BR_STEPS_DP] = if b.ends_at_dp {
            norm(b.offset + b.poses.len() as u32 - 1, tm)
        } else {
            1.0
        };
        out[layout::BR_DEADLOCK] = deadlock.is_some() as u8 as f32;
        out[layout::BR_DIST_DEADLOCK] = dist_or_sentinel(deadlock.map(|s| s.dist), tm);
        out[layout::BR_CONFLICTS] = norm(seen.len() as u32, self.n_total);
        out[layout::BR_DIST_CONFLICT] = dist_or_sentinel(seen.first().map(|s| s.dist), tm);
        out[layout::BR_CONFLICT_OPPOSING] = seen.first().is_some_and(|s| s.opposing) as u8 as f32;
        out[layout::BR_TARGET] = (b.poses.is_empty() || b.poses.iter().any(|p| p.cell == target)) as u8 as f32;
        out[layout::BR_USABLE] = usable as u8 as f32;
        out[layout::BR_OCCUPANCY] = if b.poses.is_empty() {
            0.0
        } else {
            on_branch.len() as f32 / b.poses.len() as f32
        };
        out[layout::BR_MALFUNCTION] = seen
            .iter()
            .any(|s| self.state.trains[s.train].is_malfunctioning()) as u8 as f32;
    }

    fn beyond_block(&self, out: &mut [f32], b: &Branch, target: Cell) {
        let tm = self.t_max;
        out[layout::BY_DIST_DEADLOCK] = 1.0;
        out[layout::BY_MIN_COST] = 1.0;
        out[layout::BY_MAX_COST] = 1.0;
        if !b.ends_at_dp {
            return;
        }
        let grid = self.world.grid();
        let field = self.world.routes.field(grid, target);
        let end = *b.poses.last().expect("branch ending at a DP is nonempty");
        let base = b.offset + b.poses.len() as u32 - 1;
        let mut costs = Vec::new();
        let mut min_dl: Option<u32> = None;
        let mut n = 0;
        for next in grid.successors(end) {
            n += 1;
            let sub = follow_branch(self.world, &field, next, base + 1);
            if let Some(d) = field.distance(next) {
                costs.push(base + 1 + d);
            }
            for (k, p) in sub.poses.iter().enumerate() {
                if let Some(j) = self.ctx.occupancy.get(&p.cell) {
                    if self.ctx.deadlocked.contains(j) {
                        let d = sub.offset + k as u32;
                        min_dl = Some(min_dl.map_or(d, |m| m.min(d)));
                        break;
                    }
                }
            }
        }
        out[layout::BY_DEADLOCK] = min_dl.is_some() as u8 as f32;
        out[layout::BY_DIST_DEADLOCK] = dist_or_sentinel(min_dl, tm);
        if let (Some(lo), Some(hi)) = (costs.iter().min(), costs.iter().max()) {
            out[layout::BY_MIN_COST] = norm(*lo, tm);
            out[layout::BY_MAX_COST] = norm(*hi, tm);
        }
        out[layout::BY_SUB_BRANCHES] = norm(n, 3);
        out[layout::BY_TARGET_REACHABLE] = (!costs.is_empty()) as u8 as f32;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingObservation {
    /// Three rows of `ROW` features: self, shortest-branch neighbour, alternative-branch neighbour.
    pub rows: Vec<Vec<f32>>,
    /// Planned, Deviate, Stop.
    pub mask: [bool; 3],
    /// Trains rendered in rows 1 and 2.
    pub neighbours: [Option<usize>; 2],
    pub t_max: u32,
}

impl RoutingObservation {
    pub fn flat(&self) -> Vec<f32> {
        self.rows.concat()
    }

    /// Feature of row 0 converted back to steps.
    pub fn steps(&self, index: usize) -> u32 {
        (self.rows[0][index] * self.t_max as f32).round() as u32
    }
}

pub fn build_routing_obs(world: &World, state: &SimState, ctx: &TickContext, train: usize) -> Result<RoutingObservation> {
    let t = &state.trains[train];
    let (TrainStatus::Active, Some(pose)) = (t.status, t.pose) else {
        return Err(Error::train(train, "routing observation requires an active train"));
    };
    let o = outlook(world, pose, world.train(train).target)
        .ok_or_else(|| Error::train(train, "target unreachable from current pose"))?;
    let b = RowBuilder {
        world,
        state,
        ctx,
        t_max: state.t_max,
        n_total: world.n_trains() as u32,
    };
    let mut rows = vec![b.row(train, 0).to_vec(), vec![0.0; ROW], vec![0.0; ROW]];
    let mut neighbours = [None, None];
    for (k, alt) in [false, true].into_iter().enumerate() {
        if alt && o.alternative.is_none() {
            continue;
        }
        if let Some(s) = sightings(world, state, ctx, train, pose.cell, scan_path(&o, alt)).first() {
            rows[k + 1] = b.row(s.train, 1).to_vec();
            neighbours[k] = Some(s.train);
        }
    }
    Ok(RoutingObservation {
        rows,
        mask: routing_mask(world, state, train, &o),
        neighbours,
        t_max: state.t_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchObservation {
    pub global: [f32; GLOBAL],
    pub k: usize,
    /// `n_total × k` projections ordered by train id then candidate; zeros for inactive slots.
    pub conflicts: Vec<ConflictProjection>,
    pub active_mask: Vec<bool>,
    /// Candidate routes from the origin (at most `k`).
    pub candidates: Vec<Route>,
    pub t_max: u32,
}

impl DispatchObservation {
    pub fn conflict(&self, train: usize, candidate: usize) -> ConflictProjection {
        self.conflicts[train * self.k + candidate]
    }

    /// Globals followed by the normalised conflict triples.
    pub fn flat(&self) -> Vec<f32> {
        let mut v = self.global.to_vec();
        for c in &self.conflicts {
            v.extend(normalise_projection(c, self.t_max));
        }
        v
    }
}

pub fn normalise_projection(c: &ConflictProjection, t_max: u32) -> [f32; 3] {
    if c.n_conflict_cells == 0 {
        return [0.0; 3];
    }
    [norm(c.n_conflict_cells, t_max), norm(c.dist_self, t_max), norm(c.dist_other, t_max)]
}

/// Normalisation bounds for the global dispatch features.
pub const MAX_TRAINS: f32 = 100.0;
pub const MAX_HORIZON: f32 = 2000.0;

pub fn build_dispatch_obs(world: &World, state: &SimState, train: usize, k: usize) -> Result<DispatchObservation> {
    if !state.trains[train].status.is_off_map() {
        return Err(Error::train(train, "dispatch observation requires an off-map train"));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let grid = world.grid();
    let entry = world.train(train);
    let n = world.n_trains();
    let t_max = state.t_max;
    let n_active = state.active_count();
    let global = [
        (n as f32 / MAX_TRAINS).min(1.0),
        n_active as f32 / grid.rail_cell_count().max(1) as f32,
        (t_max as f32 / MAX_HORIZON).min(1.0),
        norm(t_max.saturating_sub(state.clock), t_max),
        n_active as f32 / n.max(1) as f32,
    ];
    let candidates = world.candidate_routes(entry.origin, entry.target, k)?.as_ref().clone();
    let none = ConflictProjection {
        n_conflict_cells: 0,
        dist_self: 0,
        dist_other: 0,
    };
    let mut conflicts = vec![none; n * k];
    let mut active_mask = vec![false; n];
    for (j, t) in state.trains.iter().enumerate() {
        let (TrainStatus::Active, Some(pose)) = (t.status, t.pose) else { continue };
        active_mask[j] = true;
        let Some(best) = world.routes.field(grid, world.train(j).target).route_from(grid, pose) else { continue };
        for (c, cand) in candidates.iter().enumerate() {
            conflicts[j * k + c] = project_conflicts(cand, &best, t_max);
        }
    }
    Ok(DispatchObservation {
        global,
        k,
        conflicts,
        active_mask,
        candidates,
        t_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sums_to_row() {
        let sizes = [
            layout::STATUS.len(),
            layout::SEGMENT.len(),
            layout::SHORTEST.len(),
            layout::ALTERNATIVE.len(),
            layout::BEYOND_SHORTEST.len(),
            layout::BEYOND_ALTERNATIVE.len(),
            layout::PADDING.len(),
        ];
        assert_eq!(sizes.iter().sum::<usize>(), ROW);
        assert_eq!(layout::names().len(), ROW);
        assert_eq!(layout::PADDING.start, layout::BIAS);
    }
}
