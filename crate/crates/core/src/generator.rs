//! Seeded city-corridor map generator.
//!
//! Cities are rectangular yards of parallel tracks joined at both ends by
//! throat columns. Cities are linked along a spanning tree with one corridor
//! per parallel track; corridors are routed around city footprints and may
//! cross or merge with earlier corridors, which turns the shared cells into
//! junctions. Transitions are derived from the resulting connection sets, so
//! every generated map is reciprocal by construction.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, CellTransitions, Heading, HeadingSet, RailGrid, Station};

const MAX_ATTEMPTS: u32 = 200;
const CITY_SAMPLES: u32 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub width: u32,
    pub height: u32,
    pub n_cities: u32,
    pub max_parallel_rails: u32,
    pub seed: u64,
}

impl GeneratorParams {
    pub fn new(width: u32, height: u32, n_cities: u32, seed: u64) -> Self {
        GeneratorParams {
            width,
            height,
            n_cities,
            max_parallel_rails: 2,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_cities < 2 {
            return Err(Error::InvalidParameter("n_cities must be at least 2".into()));
        }
        if !(1..=2).contains(&self.max_parallel_rails) {
            return Err(Error::InvalidParameter("max_parallel_rails must be 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct City {
    row0: u32,
    /// Left throat column.
    col0: u32,
    /// Right throat column.
    col1: u32,
    tracks: u32,
}

impl City {
    /// Footprint including a one-cell margin, as inclusive (r0, c0, r1, c1).
    fn footprint(&self) -> (i64, i64, i64, i64) {
        (
            self.row0 as i64 - 1,
            self.col0 as i64 - 1,
            (self.row0 + self.tracks) as i64,
            self.col1 as i64 + 1,
        )
    }

    fn contains_footprint(&self, c: Cell) -> bool {
        let (r0, c0, r1, c1) = self.footprint();
        let (r, k) = (c.row as i64, c.col as i64);
        r >= r0 && r <= r1 && k >= c0 && k <= c1
    }

    fn centre_col(&self) -> i64 {
        (self.col0 + self.col1) as i64 / 2
    }

    fn centre(&self) -> (i64, i64) {
        (self.row0 as i64, self.centre_col())
    }

    /// Cell just outside the throat for `track` on the east or west side.
    fn attach(&self, east: bool, track: u32) -> Cell {
        let row = self.row0 + track;
        if east {
            Cell::new(row, self.col1 + 1)
        } else {
            Cell::new(row, self.col0 - 1)
        }
    }

    fn throat(&self, east: bool, track: u32) -> Cell {
        Cell::new(self.row0 + track, if east { self.col1 } else { self.col0 })
    }

    fn station(&self, track: u32) -> Cell {
        let len = self.col1 - self.col0 - 1;
        Cell::new(self.row0 + track, self.col0 + 1 + len / 2)
    }
}

fn overlaps(a: &City, b: &City, gap: i64) -> bool {
    let (ar0, ac0, ar1, ac1) = a.footprint();
    let (br0, bc0, br1, bc1) = b.footprint();
    !(ar1 + gap < br0 || br1 + gap < ar0 || ac1 + gap < bc0 || bc1 + gap < ac0)
}

struct Builder {
    width: u32,
    height: u32,
    conns: Vec<HeadingSet>,
}

impl Builder {
    fn idx(&self, c: Cell) -> usize {
        (c.row * self.width + c.col) as usize
    }

    fn link(&mut self, a: Cell, b: Cell) {
        let h = direction(a, b);
        let ia = self.idx(a);
        let ib = self.idx(b);
        self.conns[ia].insert(h);
        self.conns[ib].insert(h.reverse());
    }

    fn neighbour(&self, c: Cell, h: Heading) -> Option<Cell> {
        let (r, k) = (c.row as i64, c.col as i64);
        let (r, k) = match h {
            Heading::North => (r - 1, k),
            Heading::East => (r, k + 1),
            Heading::South => (r + 1, k),
            Heading::West => (r, k - 1),
        };
        if r < 0 || k < 0 || r >= self.height as i64 || k >= self.width as i64 {
            None
        } else {
            Some(Cell::new(r as u32, k as u32))
        }
    }
}

fn direction(a: Cell, b: Cell) -> Heading {
    if b.row + 1 == a.row {
        Heading::North
    } else if b.row == a.row + 1 {
        Heading::South
    } else if b.col == a.col + 1 {
        Heading::East
    } else {
        debug_assert!(b.col + 1 == a.col);
        Heading::West
    }
}

pub fn generate_map(params: &GeneratorParams) -> Result<RailGrid> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some(cities) = place_cities(params, &mut rng) else {
            continue;
        };
        let Some(grid) = build(params, &cities) else {
            continue;
        };
        if grid.validate().is_empty() && stations_pairwise_connected(&grid) {
            return Ok(grid);
        }
    }
    Err(Error::Generation {
        seed: params.seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn place_cities(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Option<Vec<City>> {
    let tracks = params.max_parallel_rails;
    let mut cities: Vec<City> = Vec::new();
    for _ in 0..params.n_cities {
        let mut placed = None;
        for _ in 0..CITY_SAMPLES {
            let len = rng.gen_range(3..=6u32);
            let span = len + 2;
            // Keep the margin plus one free ring inside the grid.
            let min_col = 3u32;
            let max_col = params.width.checked_sub(span + 3)?;
            let min_row = 2u32;
            let max_row = params.height.checked_sub(tracks + 2)?;
            if max_col < min_col || max_row < min_row {
                return None;
            }
            let col0 = rng.gen_range(min_col..=max_col);
            let row0 = rng.gen_range(min_row..=max_row);
            let city = City {
                row0,
                col0,
                col1: col0 + span - 1,
                tracks,
            };
            if cities.iter().all(|o| !overlaps(o, &city, 2)) {
                placed = Some(city);
                break;
            }
        }
        cities.push(placed?);
    }
    Some(cities)
}

fn spanning_edges(cities: &[City]) -> Vec<(usize, usize)> {
    let dist = |a: &City, b: &City| {
        let (ar, ac) = a.centre();
        let (br, bc) = b.centre();
        (ar - br).abs() + (ac - bc).abs()
    };
    let mut connected = vec![0usize];
    let mut edges = Vec::new();
    while connected.len() < cities.len() {
        let mut best: Option<(i64, usize, usize)> = None;
        for (j, cj) in cities.iter().enumerate() {
            if connected.contains(&j) {
                continue;
            }
            for &i in &connected {
                let d = dist(&cities[i], cj);
                if best.is_none_or(|b| (d, i, j) < b) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("unconnected city exists");
        edges.push((i, j));
        connected.push(j);
    }
    edges
}

fn build(params: &GeneratorParams, cities: &[City]) -> Option<RailGrid> {
    let mut b = Builder {
        width: params.width,
        height: params.height,
        conns: vec![HeadingSet::EMPTY; (params.width * params.height) as usize],
    };

    for city in cities {
        for t in 0..city.tracks {
            for col in city.col0..city.col1 {
                b.link(Cell::new(city.row0 + t, col), Cell::new(city.row0 + t, col + 1));
            }
        }
        for t in 1..city.tracks {
            for col in [city.col0, city.col1] {
                b.link(Cell::new(city.row0 + t - 1, col), Cell::new(city.row0 + t, col));
            }
        }
    }

    let blocked: Vec<bool> = (0..b.conns.len())
        .map(|idx| {
            let c = Cell::new(idx as u32 / params.width, idx as u32 % params.width);
            cities.iter().any(|city| city.contains_footprint(c))
        })
        .collect();

    for (i, j) in spanning_edges(cities) {
        let (a, z) = (&cities[i], &cities[j]);
        let a_east = z.centre_col() >= a.centre_col();
        let mut used: HashSet<Cell> = HashSet::new();
        for t in 0..a.tracks.min(z.tracks) {
            let start = a.attach(a_east, t);
            let goal = z.attach(!a_east, t);
            let path = route_corridor(&b, &blocked, start, goal, &used)?;
            for w in path.windows(2) {
                b.link(w[0], w[1]);
            }
            b.link(a.throat(a_east, t), start);
            b.link(z.throat(!a_east, t), goal);
            used.extend(path);
        }
    }

    let mut grid = RailGrid::empty(params.width, params.height);
    for (idx, s) in b.conns.iter().enumerate() {
        grid.cells[idx] = CellTransitions::from_connections(*s);
    }
    for (id, city) in cities.iter().enumerate() {
        for t in 0..city.tracks {
            grid.stations.push(Station {
                cell: city.station(t),
                city: id as u32,
            });
        }
    }
    Some(grid)
}

/// Least-cost corridor from `start` to `goal` through unblocked cells.
/// Steps cost 2, turns 3 extra, reusing existing rail 6 extra and reusing the
/// sibling corridor 12 extra.
fn route_corridor(
    b: &Builder,
    blocked: &[bool],
    start: Cell,
    goal: Cell,
    sibling: &HashSet<Cell>,
) -> Option<Vec<Cell>> {
    type Key = (Cell, Option<Heading>);
    let mut best: HashMap<Key, u64> = HashMap::new();
    let mut prev: HashMap<Key, Key> = HashMap::new();
    let mut heap = BinaryHeap::new();
    let s: Key = (start, None);
    best.insert(s, 0);
    heap.push(Reverse((0u64, start, 4usize)));
    while let Some(Reverse((cost, cell, hidx))) = heap.pop() {
        let key: Key = (cell, if hidx == 4 { None } else { Some(Heading::from_index(hidx)) });
        if best.get(&key).is_some_and(|c| *c < cost) {
            continue;
        }
        if cell == goal {
            let mut path = vec![cell];
            let mut k = key;
            while let Some(p) = prev.get(&k) {
                path.push(p.0);
                k = *p;
            }
            path.reverse();
            return Some(path);
        }
        for h in Heading::ALL {
            let Some(next) = b.neighbour(cell, h) else { continue };
            let ni = b.idx(next);
            if next != goal && blocked[ni] {
                continue;
            }
            let mut step = 2u64;
            if key.1.is_some_and(|p| p != h) {
                step += 3;
            }
            if key.1.is_some_and(|p| p == h.reverse()) {
                continue;
            }
            if !b.conns[ni].is_empty() {
                step += 6;
            }
            if sibling.contains(&next) {
                step += 12;
            }
            let nk: Key = (next, Some(h));
            let nc = cost + step;
            if best.get(&nk).is_none_or(|c| nc < *c) {
                best.insert(nk, nc);
                prev.insert(nk, key);
                heap.push(Reverse((nc, next, h.index())));
            }
        }
    }
    None
}

/// True when every station can be reached from every other station.
pub fn stations_pairwise_connected(grid: &RailGrid) -> bool {
    grid.stations.iter().all(|a| {
        let reach = grid.reachable_cells(a.cell);
        grid.stations.iter().all(|b| reach.contains(&b.cell))
    })
}
