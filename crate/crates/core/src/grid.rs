//! Static rail topology: headings, per-cell transition maps and the grid.
//!
//! A cell's transitions are a 16-bit map indexed by `incoming * 4 + outgoing`,
//! where `incoming` is the heading a train has while standing on the cell
//! (the direction it was travelling when it entered) and `outgoing` is the
//! heading it leaves with. Leaving with heading `h` moves the train into the
//! neighbour in direction `h`.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn reverse(self) -> Heading {
        Heading::from_index(self.index() + 2)
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub const fn new(row: u32, col: u32) -> Self {
        Cell { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// A cell plus the heading of the train standing on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub cell: Cell,
    pub heading: Heading,
}

impl Pose {
    pub const fn new(cell: Cell, heading: Heading) -> Self {
        Pose { cell, heading }
    }
}

/// Set of headings packed into the low four bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct HeadingSet(u8);

impl HeadingSet {
    pub const EMPTY: HeadingSet = HeadingSet(0);

    pub fn contains(self, h: Heading) -> bool {
        self.0 & (1 << h.index()) != 0
    }

    pub fn insert(&mut self, h: Heading) {
        self.0 |= 1 << h.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Iterates in N, E, S, W order.
    pub fn iter(self) -> impl Iterator<Item = Heading> {
        Heading::ALL.into_iter().filter(move |h| self.contains(*h))
    }
}

impl FromIterator<Heading> for HeadingSet {
    fn from_iter<I: IntoIterator<Item = Heading>>(iter: I) -> Self {
        let mut s = HeadingSet::EMPTY;
        for h in iter {
            s.insert(h);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellTransitions(pub u16);

impl CellTransitions {
    pub const EMPTY: CellTransitions = CellTransitions(0);

    pub fn allows(self, incoming: Heading, outgoing: Heading) -> bool {
        self.0 & (1 << (incoming.index() * 4 + outgoing.index())) != 0
    }

    pub fn set(&mut self, incoming: Heading, outgoing: Heading) {
        self.0 |= 1 << (incoming.index() * 4 + outgoing.index());
    }

    pub fn clear(&mut self, incoming: Heading, outgoing: Heading) {
        self.0 &= !(1 << (incoming.index() * 4 + outgoing.index()));
    }

    pub fn exits(self, incoming: Heading) -> HeadingSet {
        HeadingSet(((self.0 >> (incoming.index() * 4)) & 0xF) as u8)
    }

    pub fn is_rail(self) -> bool {
        self.0 != 0
    }

    /// Derives transitions from the set of sides a piece of track touches.
    ///
    /// A train may enter from any connected side and leave through any other
    /// connected side. A cell with a single connection is a dead end whose
    /// only exit is the turnaround.
    pub fn from_connections(sides: HeadingSet) -> CellTransitions {
        let mut t = CellTransitions::EMPTY;
        for incoming in Heading::ALL {
            let from_side = incoming.reverse();
            if !sides.contains(from_side) {
                continue;
            }
            if sides.len() == 1 {
                t.set(incoming, from_side);
            } else {
                for out in sides.iter().filter(|s| *s != from_side) {
                    t.set(incoming, out);
                }
            }
        }
        t
    }

    /// Sides through which a train may leave this cell.
    pub fn exit_sides(self) -> HeadingSet {
        Heading::ALL.into_iter().flat_map(|h| self.exits(h).iter()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Station {
    pub cell: Cell,
    pub city: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RailGrid {
    pub width: u32,
    pub height: u32,
    pub cells: Vec<CellTransitions>,
    pub stations: Vec<Station>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// `from` lets a train leave toward `to`, but `to` has no way out for that heading.
    OneWay { from: Cell, to: Cell, heading: Heading },
    ExitOffGrid { cell: Cell, heading: Heading },
    StationNotRail { cell: Cell },
    StationUnreachable { cell: Cell },
}

impl RailGrid {
    pub fn empty(width: u32, height: u32) -> Self {
        RailGrid {
            width,
            height,
            cells: vec![CellTransitions::EMPTY; (width * height) as usize],
            stations: Vec::new(),
        }
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    pub fn index(&self, cell: Cell) -> usize {
        (cell.row * self.width + cell.col) as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index as u32 / self.width, index as u32 % self.width)
    }

    fn check(&self, cell: Cell) -> Result<()> {
        if self.in_bounds(cell) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                cell,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn transitions(&self, cell: Cell) -> Result<CellTransitions> {
        self.check(cell)?;
        Ok(self.cells[self.index(cell)])
    }

    pub fn set_transitions(&mut self, cell: Cell, t: CellTransitions) -> Result<()> {
        self.check(cell)?;
        let i = self.index(cell);
        self.cells[i] = t;
        Ok(())
    }

    /// Unchecked transition lookup for hot paths; out-of-bounds reads as empty.
    pub(crate) fn trans(&self, cell: Cell) -> CellTransitions {
        if self.in_bounds(cell) {
            self.cells[self.index(cell)]
        } else {
            CellTransitions::EMPTY
        }
    }

    pub fn neighbour(&self, cell: Cell, heading: Heading) -> Option<Cell> {
        let (dr, dc) = heading.delta();
        let r = cell.row as i64 + dr;
        let c = cell.col as i64 + dc;
        if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
            None
        } else {
            Some(Cell::new(r as u32, c as u32))
        }
    }

    pub fn allowed_exits(&self, cell: Cell, incoming: Heading) -> Result<HeadingSet> {
        Ok(self.transitions(cell)?.exits(incoming))
    }

    /// Number of exits for a train standing on `cell` with `incoming`.
    /// Two or more makes the pose a decision point.
    pub fn branch_count(&self, cell: Cell, incoming: Heading) -> Result<usize> {
        Ok(self.allowed_exits(cell, incoming)?.len())
    }

    pub fn is_rail(&self, cell: Cell) -> bool {
        self.trans(cell).is_rail()
    }

    pub fn rail_cell_count(&self) -> usize {
        self.cells.iter().filter(|t| t.is_rail()).count()
    }

    /// Successor poses in the traversal graph, in N, E, S, W exit order.
    pub fn successors(&self, pose: Pose) -> impl Iterator<Item = Pose> + '_ {
        self.trans(pose.cell)
            .exits(pose.heading)
            .iter()
            .filter_map(move |out| self.neighbour(pose.cell, out).map(|c| Pose::new(c, out)))
    }

    pub fn is_valid_pose(&self, pose: Pose) -> bool {
        self.in_bounds(pose.cell) && !self.trans(pose.cell).exits(pose.heading).is_empty()
    }

    /// Every cell reachable from any traversable pose on `start`.
    pub fn reachable_cells(&self, start: Cell) -> HashSet<Cell> {
        let mut seen = HashSet::new();
        let mut cells = HashSet::new();
        let mut queue: VecDeque<Pose> = Heading::ALL
            .into_iter()
            .map(|h| Pose::new(start, h))
            .filter(|p| self.is_valid_pose(*p))
            .collect();
        seen.extend(queue.iter().copied());
        while let Some(p) = queue.pop_front() {
            cells.insert(p.cell);
            for next in self.successors(p) {
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        cells
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_grid(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serialisation is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: RailGrid = serde_json::from_str(s)?;
        if g.cells.len() != (g.width * g.height) as usize {
            return Err(Error::InvalidScenario(format!(
                "grid has {} cells, expected {}",
                g.cells.len(),
                g.width * g.height
            )));
        }
        Ok(g)
    }

    /// 64-bit FNV-1a over the JSON serialisation.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn validate_grid(grid: &RailGrid) -> Vec<Violation> {
    let mut out = Vec::new();
    for idx in 0..grid.cells.len() {
        let cell = grid.cell_at(idx);
        let t = grid.cells[idx];
        if !t.is_rail() {
            continue;
        }
        for side in t.exit_sides().iter() {
            match grid.neighbour(cell, side) {
                None => out.push(Violation::ExitOffGrid { cell, heading: side }),
                Some(next) => {
                    if grid.trans(next).exits(side).is_empty() {
                        out.push(Violation::OneWay {
                            from: cell,
                            to: next,
                            heading: side,
                        });
                    }
                }
            }
        }
    }

    let rail_stations: Vec<Cell> = grid
        .stations
        .iter()
        .map(|s| s.cell)
        .filter(|c| grid.is_rail(*c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for s in &grid.stations {
        if !grid.is_rail(s.cell) {
            out.push(Violation::StationNotRail { cell: s.cell });
        }
    }
    let reach: Vec<HashSet<Cell>> = rail_stations.iter().map(|c| grid.reachable_cells(*c)).collect();
    for (i, target) in rail_stations.iter().enumerate() {
        let ok = rail_stations
            .iter()
            .enumerate()
            .any(|(j, _)| j != i && reach[j].contains(target));
        if !ok {
            out.push(Violation::StationUnreachable { cell: *target });
        }
    }
    out
}
