//! Timetables, episode configuration and the scenario file format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, Heading, Pose, RailGrid};

/// Cells per tick as an exact fraction in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Speed {
    num: u32,
    den: u32,
}

impl Speed {
    pub const ONE: Speed = Speed { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Speed> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidParameter(format!("speed {num}/{den} not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(Speed {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Ticks needed to cover `cells` from a standing start.
    pub fn travel_ticks(self, cells: u32) -> u32 {
        (cells as u64 * self.den as u64).div_ceil(self.num as u64) as u32
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Speed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Speed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Speed> {
        let bad = || Error::InvalidParameter(format!("cannot parse speed '{s}'"));
        match s.split_once('/') {
            Some((n, d)) => Speed::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => {
                if s.trim() == "1" {
                    Ok(Speed::ONE)
                } else {
                    // Decimal forms such as 0.5 or 0.25.
                    let v: f64 = s.trim().parse().map_err(|_| bad())?;
                    let den = 1000u32;
                    Speed::new((v * den as f64).round() as u32, den)
                }
            }
        }
    }
}

impl TryFrom<String> for Speed {
    type Error = Error;
    fn try_from(s: String) -> Result<Speed> {
        s.parse()
    }
}

impl From<Speed> for String {
    fn from(s: Speed) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimetableEntry {
    pub id: usize,
    pub origin: Pose,
    pub target: Cell,
    pub earliest_departure: u32,
    pub scheduled_arrival: u32,
    pub speed: Speed,
}

/// How cyclic motion dependencies between trains are resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CyclePolicy {
    /// Every cyclic dependency, including two-train swaps, is rejected.
    #[default]
    RejectAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Explicit horizon; when absent it is derived from the grid and fleet.
    pub t_max: Option<u32>,
    pub beta: f64,
    pub malfunction_rate: f64,
    pub malfunction_duration: (u32, u32),
    pub cycle_policy: CyclePolicy,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            t_max: None,
            beta: 8.0,
            malfunction_rate: 0.0,
            malfunction_duration: (20, 50),
            cycle_policy: CyclePolicy::RejectAll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: RailGrid,
    pub trains: Vec<TimetableEntry>,
    pub config: EpisodeConfig,
}

impl Scenario {
    pub fn n_trains(&self) -> usize {
        self.trains.len()
    }

    pub fn n_cities(&self) -> usize {
        self.grid
            .stations
            .iter()
            .map(|s| s.city)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn horizon(&self) -> Result<u32> {
        horizon(&self.grid, self.trains.len(), self.n_cities(), &self.config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        if !(0.0..=1.0).contains(&cfg.malfunction_rate) {
            return Err(Error::InvalidScenario("malfunction_rate outside [0, 1]".into()));
        }
        let (lo, hi) = cfg.malfunction_duration;
        if lo > hi || lo == 0 {
            return Err(Error::InvalidScenario(format!("malfunction duration [{lo}, {hi}] is not a valid range")));
        }
        let t_max = self.horizon()?;
        let stations: BTreeSet<Cell> = self.grid.stations.iter().map(|s| s.cell).collect();
        for (i, t) in self.trains.iter().enumerate() {
            let fail = |m: &str| Err(Error::InvalidScenario(format!("train {i}: {m}")));
            if t.id != i {
                return fail("ids must be 0..n in order");
            }
            if t.earliest_departure >= t.scheduled_arrival || t.scheduled_arrival > t_max {
                return fail("requires earliest_departure < scheduled_arrival <= T_max");
            }
            if !stations.contains(&t.origin.cell) || !self.grid.is_valid_pose(t.origin) {
                return fail("origin must be a station with a traversable heading");
            }
            if !stations.contains(&t.target) {
                return fail("target must be a station");
            }
            if t.target == t.origin.cell {
                return fail("origin and target coincide");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serialisation is infallible")
    }

    pub fn from_json(s: &str) -> Result<Scenario> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }
}

/// `ceil(beta * (width + height + n_trains / n_cities))` unless overridden.
pub fn horizon(grid: &RailGrid, n_trains: usize, n_cities: usize, cfg: &EpisodeConfig) -> Result<u32> {
    if let Some(t) = cfg.t_max {
        return Ok(t);
    }
    if cfg.beta.is_nan() || cfg.beta <= 0.0 || !cfg.beta.is_finite() {
        return Err(Error::InvalidParameter("horizon beta must be positive".into()));
    }
    let per_city = n_trains as f64 / n_cities.max(1) as f64;
    Ok((cfg.beta * (grid.width as f64 + grid.height as f64 + per_city)).ceil() as u32)
}

/// Headings on which a train standing on `cell` can leave it.
pub fn departure_headings(grid: &RailGrid, cell: Cell) -> Vec<Heading> {
    Heading::ALL
        .into_iter()
        .filter(|h| grid.is_valid_pose(Pose::new(cell, *h)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_formula() {
        let g = RailGrid::empty(30, 30);
        let cfg = EpisodeConfig::default();
        assert_eq!(horizon(&g, 7, 2, &cfg).unwrap(), 508);
    }

    #[test]
    fn horizon_override_and_guard() {
        let g = RailGrid::empty(30, 30);
        let cfg = EpisodeConfig {
            t_max: Some(123),
            ..Default::default()
        };
        assert_eq!(horizon(&g, 7, 2, &cfg).unwrap(), 123);
        let cfg = EpisodeConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(horizon(&g, 7, 2, &cfg).is_err());
    }

    #[test]
    fn speed_parsing() {
        assert_eq!("1/2".parse::<Speed>().unwrap(), Speed::new(1, 2).unwrap());
        assert_eq!("0.5".parse::<Speed>().unwrap(), Speed::new(1, 2).unwrap());
        assert_eq!("2/4".parse::<Speed>().unwrap().den(), 2);
        assert!("3/2".parse::<Speed>().is_err());
        assert!("0".parse::<Speed>().is_err());
        assert_eq!(Speed::new(1, 2).unwrap().travel_ticks(5), 10);
        assert_eq!(Speed::new(2, 3).unwrap().travel_ticks(2), 3);
    }
}
