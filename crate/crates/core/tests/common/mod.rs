#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use railflow::grid::{Cell, CellTransitions, Heading, HeadingSet, Pose, RailGrid, Station};
use railflow::scenario::{EpisodeConfig, Scenario, Speed, TimetableEntry};
use railflow::sim::{SimState, TrainStatus, World};

/// Grid from ASCII art: any non-'.' character is rail, connected to its
/// rail neighbours. Digits mark stations of that city.
pub fn ascii_grid(rows: &[&str]) -> RailGrid {
    let h = rows.len() as u32;
    let w = rows[0].len() as u32;
    let rail = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && (r as u32) < h && (c as u32) < w && rows[r as usize].as_bytes()[c as usize] != b'.'
    };
    let mut g = RailGrid::empty(w, h);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if !rail(r, c) {
                continue;
            }
            let mut s = HeadingSet::EMPTY;
            for (hd, dr, dc) in [(Heading::North, -1, 0), (Heading::East, 0, 1), (Heading::South, 1, 0), (Heading::West, 0, -1)] {
                if rail(r + dr, c + dc) {
                    s.insert(hd);
                }
            }
            g.set_transitions(Cell::new(r as u32, c as u32), CellTransitions::from_connections(s)).unwrap();
            let ch = rows[r as usize].as_bytes()[c as usize];
            if ch.is_ascii_digit() {
                g.stations.push(Station {
                    cell: Cell::new(r as u32, c as u32),
                    city: (ch - b'0') as u32,
                });
            }
        }
    }
    g
}

pub struct TrainSpec {
    pub origin: Pose,
    pub target: Cell,
    pub departure: u32,
    pub arrival: u32,
    pub speed: Speed,
}

pub fn train(origin: (u32, u32, Heading), target: (u32, u32), departure: u32, arrival: u32) -> TrainSpec {
    TrainSpec {
        origin: Pose::new(Cell::new(origin.0, origin.1), origin.2),
        target: Cell::new(target.0, target.1),
        departure,
        arrival,
        speed: Speed::ONE,
    }
}

pub fn world(grid: RailGrid, trains: Vec<TrainSpec>, t_max: u32, malfunction_rate: f64) -> Arc<World> {
    let trains = trains
        .into_iter()
        .enumerate()
        .map(|(id, t)| TimetableEntry {
            id,
            origin: t.origin,
            target: t.target,
            earliest_departure: t.departure,
            scheduled_arrival: t.arrival,
            speed: t.speed,
        })
        .collect();
    let sc = Scenario {
        grid,
        trains,
        config: EpisodeConfig {
            t_max: Some(t_max),
            malfunction_rate,
            ..Default::default()
        },
    };
    World::new(sc).unwrap()
}

/// Single-row corridor of `len` cells with stations at both ends.
pub fn corridor(len: usize) -> RailGrid {
    let row = format!("0{}1", "#".repeat(len - 2));
    ascii_grid(&[&row])
}

/// Puts a train on the map at `pose`, bypassing dispatch.
pub fn place(state: &mut SimState, train: usize, pose: (u32, u32, Heading)) {
    let t = &mut state.trains[train];
    t.status = TrainStatus::Active;
    t.pose = Some(Pose::new(Cell::new(pose.0, pose.1), pose.2));
    t.departed_at = Some(0);
    t.moving = true;
}

/// Pose successors derived directly from the transition bits.
pub fn oracle_successors(grid: &RailGrid, p: Pose) -> Vec<Pose> {
    let t = grid.transitions(p.cell).unwrap();
    Heading::ALL
        .iter()
        .filter(|&&out| t.allows(p.heading, out))
        .filter_map(|&out| grid.neighbour(p.cell, out).map(|c| Pose::new(c, out)))
        .collect()
}

/// Forward breadth-first search over poses; cost of the shortest route.
pub fn oracle_shortest(grid: &RailGrid, from: Pose, to: Cell) -> Option<u32> {
    if from.cell == to {
        return Some(0);
    }
    let mut dist: HashMap<Pose, u32> = HashMap::from([(from, 0)]);
    let mut q = VecDeque::from([from]);
    while let Some(p) = q.pop_front() {
        let d = dist[&p];
        for n in oracle_successors(grid, p) {
            if n.cell == to {
                return Some(d + 1);
            }
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(n) {
                e.insert(d + 1);
                q.push_back(n);
            }
        }
    }
    None
}

/// Costs of every pose-simple route from `from` that reaches `to` only at its end,
/// up to `bound` steps. `None` when the search exceeds `budget` expansions.
pub fn oracle_all_costs(grid: &RailGrid, from: Pose, to: Cell, bound: u32, budget: usize) -> Option<Vec<u32>> {
    struct Dfs<'a> {
        grid: &'a RailGrid,
        to: Cell,
        bound: u32,
        budget: usize,
        seen: HashSet<Pose>,
        out: Vec<u32>,
    }
    impl Dfs<'_> {
        fn go(&mut self, p: Pose, depth: u32) -> bool {
            if self.budget == 0 {
                return false;
            }
            self.budget -= 1;
            if p.cell == self.to {
                self.out.push(depth);
                return true;
            }
            if depth == self.bound {
                return true;
            }
            for n in oracle_successors(self.grid, p) {
                if self.seen.insert(n) {
                    let ok = self.go(n, depth + 1);
                    self.seen.remove(&n);
                    if !ok {
                        return false;
                    }
                }
            }
            true
        }
    }
    let mut dfs = Dfs { grid, to, bound, budget, seen: HashSet::from([from]), out: Vec::new() };
    if !dfs.go(from, 0) {
        return None;
    }
    dfs.out.sort_unstable();
    Some(dfs.out)
}

/// Every valid pose of the grid.
pub fn rail_poses(grid: &RailGrid) -> Vec<Pose> {
    let mut out = Vec::new();
    for r in 0..grid.height {
        for c in 0..grid.width {
            for h in Heading::ALL {
                let p = Pose::new(Cell::new(r, c), h);
                if grid.is_valid_pose(p) {
                    out.push(p);
                }
            }
        }
    }
    out
}
