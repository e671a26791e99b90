//! Route search on the pose graph, conflict projection and deadlock detection.
//!
//! Search runs over `(cell, heading)` poses because the heading decides which
//! exits a switch offers; a cell-level search would route trains through
//! switches the wrong way round.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, Heading, Pose, RailGrid};
use crate::sim::{SimState, TrainStatus};

pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub poses: Vec<Pose>,
}

impl Route {
    /// Ticks at speed 1.
    pub fn cost(&self) -> u32 {
        self.poses.len().saturating_sub(1) as u32
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.poses.iter().map(|p| p.cell)
    }

    pub fn first(&self) -> Pose {
        self.poses[0]
    }

    pub fn last(&self) -> Pose {
        *self.poses.last().expect("routes are nonempty")
    }

    pub fn is_transition_valid(&self, grid: &RailGrid) -> bool {
        self.poses
            .windows(2)
            .all(|w| grid.successors(w[0]).any(|s| s == w[1]))
    }
}

/// Steps-to-target for every pose of the grid, for one target cell.
#[derive(Debug, Clone)]
pub struct DistanceField {
    target: Cell,
    width: u32,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn compute(grid: &RailGrid, target: Cell) -> DistanceField {
        let mut dist = vec![UNREACHABLE; grid.cells.len() * 4];
        let slot = |c: Cell, h: Heading| grid.index(c) * 4 + h.index();
        let mut queue = VecDeque::new();
        if grid.in_bounds(target) {
            for h in Heading::ALL {
                dist[slot(target, h)] = 0;
                queue.push_back(Pose::new(target, h));
            }
        }
        while let Some(p) = queue.pop_front() {
            let d = dist[slot(p.cell, p.heading)];
            // Predecessors enter p.cell travelling p.heading from the cell behind it.
            let Some(prev) = grid.neighbour(p.cell, p.heading.reverse()) else { continue };
            let t = grid.trans(prev);
            for h in Heading::ALL {
                if t.allows(h, p.heading) && dist[slot(prev, h)] == UNREACHABLE {
                    dist[slot(prev, h)] = d + 1;
                    queue.push_back(Pose::new(prev, h));
                }
            }
        }
        DistanceField {
            target,
            width: grid.width,
            dist,
        }
    }

    pub fn target(&self) -> Cell {
        self.target
    }

    pub fn distance(&self, pose: Pose) -> Option<u32> {
        let i = ((pose.cell.row * self.width + pose.cell.col) as usize) * 4 + pose.heading.index();
        match self.dist.get(i) {
            Some(&d) if d != UNREACHABLE => Some(d),
            _ => None,
        }
    }

    /// Exit headings of `pose` that lead toward the target, ordered by
    /// remaining distance then heading.
    pub fn ranked_exits(&self, grid: &RailGrid, pose: Pose) -> Vec<(Heading, u32)> {
        let mut out: Vec<(Heading, u32)> = grid
            .trans(pose.cell)
            .exits(pose.heading)
            .iter()
            .filter_map(|h| {
                let next = grid.neighbour(pose.cell, h)?;
                self.distance(Pose::new(next, h)).map(|d| (h, d + 1))
            })
            .collect();
        out.sort_by_key(|(h, d)| (*d, h.index()));
        out
    }

    pub fn best_exit(&self, grid: &RailGrid, pose: Pose) -> Option<Heading> {
        self.ranked_exits(grid, pose).first().map(|(h, _)| *h)
    }

    /// Steepest-descent route. Every suffix of a route produced here is the
    /// route produced from that suffix's first pose.
    pub fn route_from(&self, grid: &RailGrid, pose: Pose) -> Option<Route> {
        let mut d = self.distance(pose)?;
        let mut poses = vec![pose];
        let mut cur = pose;
        while d > 0 {
            let h = self.best_exit(grid, cur)?;
            cur = Pose::new(grid.neighbour(cur.cell, h)?, h);
            poses.push(cur);
            d -= 1;
        }
        Some(Route { poses })
    }
}

/// Distance fields for every station cell of a grid, built once and shared.
#[derive(Debug, Clone, Default)]
pub struct RouteTable {
    fields: HashMap<Cell, DistanceField>,
}

impl RouteTable {
    pub fn for_stations(grid: &RailGrid) -> RouteTable {
        let mut fields = HashMap::new();
        for s in &grid.stations {
            fields
                .entry(s.cell)
                .or_insert_with(|| DistanceField::compute(grid, s.cell));
        }
        RouteTable { fields }
    }

    pub fn field<'a>(&'a self, grid: &RailGrid, target: Cell) -> Cow<'a, DistanceField> {
        match self.fields.get(&target) {
            Some(f) => Cow::Borrowed(f),
            None => Cow::Owned(DistanceField::compute(grid, target)),
        }
    }
}

fn check_pose(grid: &RailGrid, from: Pose) -> Result<()> {
    if grid.is_valid_pose(from) {
        Ok(())
    } else if !grid.in_bounds(from.cell) {
        Err(Error::OutOfBounds {
            cell: from.cell,
            width: grid.width,
            height: grid.height,
        })
    } else {
        Err(Error::NotRailPose { cell: from.cell })
    }
}

/// Minimum-cost route ignoring all trains; `None` when the target is unreachable.
pub fn shortest_route(grid: &RailGrid, from: Pose, to: Cell) -> Result<Option<Route>> {
    check_pose(grid, from)?;
    Ok(DistanceField::compute(grid, to).route_from(grid, from))
}

/// Replanning after a deviation is a fresh shortest route from the current pose.
pub fn replan_from(grid: &RailGrid, pose: Pose, target: Cell) -> Result<Option<Route>> {
    shortest_route(grid, pose, target)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKPaths {
    pub k: usize,
    pub routes: Vec<Route>,
}

/// Up to `k` distinct loop-free routes in nondecreasing cost, by deviation
/// (spur-node) enumeration. Equal-cost candidates are ordered by pose sequence.
pub fn top_k_routes(grid: &RailGrid, from: Pose, to: Cell, k: usize) -> Result<TopKPaths> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    check_pose(grid, from)?;
    let field = DistanceField::compute(grid, to);
    top_k_with_field(grid, &field, from, k)
}

pub(crate) fn top_k_with_field(grid: &RailGrid, field: &DistanceField, from: Pose, k: usize) -> Result<TopKPaths> {
    let to = field.target();
    let mut accepted: Vec<Route> = Vec::new();
    let Some(first) = field.route_from(grid, from) else {
        return Ok(TopKPaths { k, routes: accepted });
    };
    accepted.push(first);
    let mut candidates: BTreeSet<(u32, Vec<Pose>)> = BTreeSet::new();

    while accepted.len() < k {
        let last = accepted.last().expect("nonempty").poses.clone();
        for i in 0..last.len().saturating_sub(1) {
            let spur = last[i];
            let root = &last[..=i];
            let mut banned_edges: HashSet<(Pose, Pose)> = HashSet::new();
            for r in &accepted {
                if r.poses.len() > i + 1 && &r.poses[..=i] == root {
                    banned_edges.insert((r.poses[i], r.poses[i + 1]));
                }
            }
            let banned_nodes: HashSet<Pose> = root[..i].iter().copied().collect();
            if let Some(tail) = spur_search(grid, spur, to, &banned_nodes, &banned_edges) {
                let mut poses = root[..i].to_vec();
                poses.extend(tail);
                let cost = poses.len() as u32 - 1;
                if !accepted.iter().any(|r| r.poses == poses) {
                    candidates.insert((cost, poses));
                }
            }
        }
        match candidates.pop_first() {
            Some((_, poses)) => accepted.push(Route { poses }),
            None => break,
        }
    }
    Ok(TopKPaths { k, routes: accepted })
}

fn spur_search(
    grid: &RailGrid,
    start: Pose,
    to: Cell,
    banned_nodes: &HashSet<Pose>,
    banned_edges: &HashSet<(Pose, Pose)>,
) -> Option<Vec<Pose>> {
    if start.cell == to {
        return Some(vec![start]);
    }
    let mut prev: HashMap<Pose, Pose> = HashMap::new();
    let mut seen: HashSet<Pose> = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        for next in grid.successors(p) {
            if banned_nodes.contains(&next) || banned_edges.contains(&(p, next)) || !seen.insert(next) {
                continue;
            }
            prev.insert(next, p);
            if next.cell == to {
                let mut path = vec![next];
                let mut cur = next;
                while let Some(q) = prev.get(&cur) {
                    path.push(*q);
                    cur = *q;
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(next);
        }
    }
    None
}

/// First pose at or after `from` with two or more exits, excluding the final
/// (target) pose, and the number of steps to it. When no decision point
/// remains the step count is the distance to the end of the route.
pub fn next_decision_point(grid: &RailGrid, route: &Route, from: usize) -> (Option<usize>, u32) {
    let end = route.poses.len().saturating_sub(1);
    for j in from..end {
        let p = route.poses[j];
        if grid.trans(p.cell).exits(p.heading).len() >= 2 {
            return (Some(j), (j - from) as u32);
        }
    }
    (None, end.saturating_sub(from) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictProjection {
    pub n_conflict_cells: u32,
    pub dist_self: u32,
    pub dist_other: u32,
}

impl ConflictProjection {
    pub fn none(sentinel: u32) -> Self {
        ConflictProjection {
            n_conflict_cells: 0,
            dist_self: sentinel,
            dist_other: sentinel,
        }
    }

    pub fn has_conflict(&self) -> bool {
        self.n_conflict_cells > 0
    }
}

/// Spatial overlap of two routes. Distances are offsets to the first cell of
/// `a` that `b` also visits; `sentinel` stands in when they share nothing.
pub fn project_conflicts(a: &Route, b: &Route, sentinel: u32) -> ConflictProjection {
    let cells_a: HashSet<Cell> = a.cells().collect();
    let cells_b: HashSet<Cell> = b.cells().collect();
    let n = cells_a.intersection(&cells_b).count() as u32;
    if n == 0 {
        return ConflictProjection::none(sentinel);
    }
    let (dist_self, cell) = a
        .cells()
        .enumerate()
        .find(|(_, c)| cells_b.contains(c))
        .expect("intersection is nonempty");
    let dist_other = b.cells().position(|c| c == cell).expect("shared cell");
    ConflictProjection {
        n_conflict_cells: n,
        dist_self: dist_self as u32,
        dist_other: dist_other as u32,
    }
}

/// Blocking relation between active trains for the current tick.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WaitForGraph {
    /// i -> trains occupying i's next cells; present only when every next cell is occupied.
    pub edges: BTreeMap<usize, Vec<usize>>,
}

pub fn occupancy(state: &SimState) -> HashMap<Cell, usize> {
    state
        .trains
        .iter()
        .enumerate()
        .filter(|(_, t)| t.status == TrainStatus::Active)
        .filter_map(|(i, t)| t.pose.map(|p| (p.cell, i)))
        .collect()
}

pub fn wait_for_graph(grid: &RailGrid, state: &SimState) -> WaitForGraph {
    let occ = occupancy(state);
    let mut edges = BTreeMap::new();
    for (i, t) in state.trains.iter().enumerate() {
        let (TrainStatus::Active, Some(pose)) = (t.status, t.pose) else { continue };
        let next: Vec<Cell> = grid.successors(pose).map(|p| p.cell).collect();
        if next.is_empty() {
            continue;
        }
        let blockers: Option<Vec<usize>> = next.iter().map(|c| occ.get(c).copied()).collect();
        if let Some(mut b) = blockers {
            b.sort_unstable();
            b.dedup();
            edges.insert(i, b);
        }
    }
    WaitForGraph { edges }
}

/// Trains that can never move again.
///
/// Starts from every fully blocked train and repeatedly drops trains that
/// wait on someone outside the set. What remains is closed: each member's
/// every exit is held by another member, so any motion chain starting in the
/// set stays in it and must close a cycle, which the motion rule rejects.
pub fn detect_deadlocks(grid: &RailGrid, state: &SimState) -> BTreeSet<usize> {
    let g = wait_for_graph(grid, state);
    let mut set: BTreeSet<usize> = g.edges.keys().copied().collect();
    loop {
        let drop: Vec<usize> = set
            .iter()
            .copied()
            .filter(|i| g.edges[i].iter().any(|j| !set.contains(j)))
            .collect();
        if drop.is_empty() {
            break;
        }
        for i in drop {
            set.remove(&i);
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellTransitions, HeadingSet};

    fn corridor(len: u32) -> RailGrid {
        let mut g = RailGrid::empty(len, 1);
        for c in 0..len {
            let mut s = HeadingSet::EMPTY;
            if c > 0 {
                s.insert(Heading::West);
            }
            if c + 1 < len {
                s.insert(Heading::East);
            }
            g.set_transitions(Cell::new(0, c), CellTransitions::from_connections(s)).unwrap();
        }
        g
    }

    #[test]
    fn corridor_end_to_end() {
        let g = corridor(6);
        let r = shortest_route(&g, Pose::new(Cell::new(0, 0), Heading::West), Cell::new(0, 5))
            .unwrap()
            .unwrap();
        assert_eq!(r.cost(), 5);
        assert!(r.is_transition_valid(&g));
    }

    #[test]
    fn disconnected_target_is_none() {
        let mut g = corridor(6);
        g.set_transitions(Cell::new(0, 3), CellTransitions::EMPTY).unwrap();
        g.set_transitions(Cell::new(0, 2), CellTransitions::from_connections([Heading::West].into_iter().collect()))
            .unwrap();
        let r = shortest_route(&g, Pose::new(Cell::new(0, 0), Heading::West), Cell::new(0, 5)).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn non_rail_pose_is_error() {
        let g = corridor(4);
        assert!(shortest_route(&g, Pose::new(Cell::new(0, 0), Heading::North), Cell::new(0, 3)).is_err());
        assert!(shortest_route(&g, Pose::new(Cell::new(3, 0), Heading::East), Cell::new(0, 3)).is_err());
    }

    #[test]
    fn decision_point_lookahead() {
        // Corridor with a switch at column 5 (spur to the south).
        let mut g = RailGrid::empty(8, 2);
        for c in 0..8 {
            let mut s: HeadingSet = HeadingSet::EMPTY;
            if c > 0 {
                s.insert(Heading::West);
            }
            if c < 7 {
                s.insert(Heading::East);
            }
            if c == 5 {
                s.insert(Heading::South);
            }
            g.set_transitions(Cell::new(0, c), CellTransitions::from_connections(s)).unwrap();
        }
        g.set_transitions(Cell::new(1, 5), CellTransitions::from_connections([Heading::North].into_iter().collect()))
            .unwrap();
        let r = shortest_route(&g, Pose::new(Cell::new(0, 0), Heading::West), Cell::new(0, 7))
            .unwrap()
            .unwrap();
        assert_eq!(next_decision_point(&g, &r, 1), (Some(5), 4));
        assert_eq!(next_decision_point(&g, &r, 5), (Some(5), 0));
        assert_eq!(next_decision_point(&g, &r, 6), (None, 1));
        let plain = corridor(5);
        let r = shortest_route(&plain, Pose::new(Cell::new(0, 0), Heading::West), Cell::new(0, 4))
            .unwrap()
            .unwrap();
        assert_eq!(next_decision_point(&plain, &r, 0).0, None);
    }

    #[test]
    fn conflict_projection_cases() {
        let g = corridor(8);
        let a = shortest_route(&g, Pose::new(Cell::new(0, 0), Heading::West), Cell::new(0, 7))
            .unwrap()
            .unwrap();
        let p = project_conflicts(&a, &a, 100);
        assert_eq!((p.n_conflict_cells, p.dist_self, p.dist_other), (8, 0, 0));
        let lone = Route {
            poses: vec![Pose::new(Cell::new(5, 5), Heading::East)],
        };
        assert_eq!(project_conflicts(&a, &lone, 100), ConflictProjection::none(100));
    }

    #[test]
    fn top_k_degenerate_cases() {
        let g = corridor(6);
        let from = Pose::new(Cell::new(0, 0), Heading::West);
        let one = top_k_routes(&g, from, Cell::new(0, 5), 1).unwrap();
        assert_eq!(one.routes.len(), 1);
        assert_eq!(Some(one.routes[0].clone()), shortest_route(&g, from, Cell::new(0, 5)).unwrap());
        let two = top_k_routes(&g, from, Cell::new(0, 5), 2).unwrap();
        assert_eq!(two.routes.len(), 1);
        assert!(top_k_routes(&g, from, Cell::new(0, 5), 0).is_err());
    }
}
