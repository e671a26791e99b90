//! Benchmark levels and seeded scenario construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{generate_map, GeneratorParams};
use crate::grid::{Heading, Pose, RailGrid, Station};
use crate::path::DistanceField;
use crate::scenario::{horizon, departure_headings, EpisodeConfig, Scenario, Speed, TimetableEntry};

/// Speeds handed out to trains round-robin by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SpeedProfile {
    Constant,
    Fractional(Vec<Speed>),
}

impl SpeedProfile {
    /// Half the fleet at full speed, half at 1/2.
    pub fn half_slow() -> SpeedProfile {
        SpeedProfile::Fractional(vec![Speed::ONE, Speed::new(1, 2).expect("valid")])
    }

    pub fn speed_for(&self, train: usize) -> Speed {
        match self {
            SpeedProfile::Constant => Speed::ONE,
            SpeedProfile::Fractional(v) => v[train % v.len()],
        }
    }

    pub fn min_speed(&self) -> Speed {
        match self {
            SpeedProfile::Constant => Speed::ONE,
            SpeedProfile::Fractional(v) => *v
                .iter()
                .min_by(|a, b| a.as_f64().total_cmp(&b.as_f64()))
                .expect("nonempty"),
        }
    }
}

impl fmt::Display for SpeedProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpeedProfile::Constant => write!(f, "constant"),
            SpeedProfile::Fractional(v) => {
                let parts: Vec<String> = v.iter().map(|s| s.to_string()).collect();
                write!(f, "fractional:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for SpeedProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<SpeedProfile> {
        if s == "constant" {
            return Ok(SpeedProfile::Constant);
        }
        let list = s
            .strip_prefix("fractional:")
            .ok_or_else(|| Error::InvalidParameter(format!("unknown speed profile '{s}'")))?;
        let speeds = list.split(',').map(str::parse).collect::<Result<Vec<Speed>>>()?;
        if speeds.is_empty() {
            return Err(Error::InvalidParameter("empty speed list".into()));
        }
        Ok(SpeedProfile::Fractional(speeds))
    }
}

impl TryFrom<String> for SpeedProfile {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SpeedProfile> for String {
    fn from(p: SpeedProfile) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub id: u32,
    pub n_trains: usize,
    pub width: u32,
    pub height: u32,
    pub n_cities: u32,
    pub malfunction_rate: f64,
    pub malfunction_duration: (u32, u32),
    pub speed_profile: SpeedProfile,
    /// Set when any field differs from the reference table.
    pub custom: bool,
}

const TABLE: [(usize, u32, u32, u32, f64); 5] = [
    (7, 30, 30, 2, 1.0 / 540.0),
    (10, 30, 30, 2, 1.0 / 900.0),
    (20, 30, 30, 3, 1.0 / 1800.0),
    (50, 30, 35, 3, 1.0 / 4500.0),
    (80, 35, 30, 5, 1.0 / 7200.0),
];

impl LevelSpec {
    pub fn level(id: u32) -> Result<LevelSpec> {
        let &(n_trains, width, height, n_cities, rate) = TABLE
            .get(id as usize)
            .ok_or_else(|| Error::InvalidParameter(format!("no level {id}; levels are 0..=4")))?;
        Ok(LevelSpec {
            id,
            n_trains,
            width,
            height,
            n_cities,
            malfunction_rate: rate,
            malfunction_duration: (20, 50),
            speed_profile: SpeedProfile::Constant,
            custom: false,
        })
    }

    pub fn all() -> Vec<LevelSpec> {
        (0..TABLE.len() as u32).map(|i| LevelSpec::level(i).expect("table")).collect()
    }

    pub fn without_malfunctions(mut self) -> LevelSpec {
        self.malfunction_rate = 0.0;
        self.custom = true;
        self
    }

    pub fn with_speeds(mut self, profile: SpeedProfile) -> LevelSpec {
        self.custom |= profile != SpeedProfile::Constant;
        self.speed_profile = profile;
        self
    }

    pub fn name(&self) -> String {
        if self.custom {
            format!("level{}-custom", self.id)
        } else {
            format!("level{}", self.id)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimetableParams {
    /// Extra fraction of the unobstructed travel time granted before the scheduled arrival.
    pub slack: f64,
    /// Fraction of the feasible departure range actually used.
    pub departure_spread: f64,
    /// Fraction of the horizon kept free at the end of every schedule.
    pub end_buffer: f64,
    pub beta: f64,
}

impl Default for TimetableParams {
    fn default() -> Self {
        TimetableParams {
            slack: 0.25,
            departure_spread: 0.25,
            end_buffer: 0.05,
            beta: 8.0,
        }
    }
}

/// Map and timetable for one seed of a level.
pub fn generate_scenario(level: &LevelSpec, seed: u64, params: &TimetableParams) -> Result<Scenario> {
    let grid = generate_map(&GeneratorParams::new(level.width, level.height, level.n_cities, seed))
        .map_err(|e| e.with_seed(seed))?;
    let mut config = EpisodeConfig {
        beta: params.beta,
        malfunction_rate: level.malfunction_rate,
        malfunction_duration: level.malfunction_duration,
        ..Default::default()
    };
    let base = horizon(&grid, level.n_trains, level.n_cities as usize, &config)?;
    let min_speed = level.speed_profile.min_speed();
    if min_speed != Speed::ONE {
        // Slow trains need proportionally more time to cover the same network.
        config.t_max = Some((base as u64 * min_speed.den() as u64).div_ceil(min_speed.num() as u64) as u32);
    }
    let t_max = horizon(&grid, level.n_trains, level.n_cities as usize, &config)?;
    let trains = timetable(&grid, level, seed, t_max, params)?;
    let sc = Scenario { grid, trains, config };
    sc.validate().map_err(|e| e.with_seed(seed))?;
    Ok(sc)
}

fn timetable(grid: &RailGrid, level: &LevelSpec, seed: u64, t_max: u32, params: &TimetableParams) -> Result<Vec<TimetableEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7469_6d65_7461_626c);
    let stations: &[Station] = &grid.stations;
    let latest = t_max - (params.end_buffer * t_max as f64).ceil() as u32;
    let mut out = Vec::with_capacity(level.n_trains);
    for id in 0..level.n_trains {
        let speed = level.speed_profile.speed_for(id);
        let (origin, target, cost) = (0..100)
            .find_map(|_| {
                let o = stations.choose(&mut rng)?;
                let others: Vec<&Station> = stations.iter().filter(|s| s.city != o.city).collect();
                let t = others.choose(&mut rng)?;
                let field = DistanceField::compute(grid, t.cell);
                let (h, d): (Heading, u32) = departure_headings(grid, o.cell)
                    .into_iter()
                    .filter_map(|h| field.distance(Pose::new(o.cell, h)).map(|d| (h, d)))
                    .min_by_key(|&(h, d)| (d, h.index()))?;
                Some((Pose::new(o.cell, h), t.cell, d))
            })
            .ok_or(Error::Generation { seed, attempts: 100 })?;
        let travel = speed.travel_ticks(cost);
        let budget = travel + (params.slack * travel as f64).ceil() as u32;
        let span = latest.saturating_sub(budget);
        let max_ed = (params.departure_spread * span as f64).floor() as u32;
        let earliest_departure = rng.gen_range(0..=max_ed);
        out.push(TimetableEntry {
            id,
            origin,
            target,
            earliest_departure,
            scheduled_arrival: (earliest_departure + budget).min(t_max),
            speed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows() {
        let l0 = LevelSpec::level(0).unwrap();
        assert_eq!((l0.n_trains, l0.width, l0.height, l0.n_cities), (7, 30, 30, 2));
        assert!((l0.malfunction_rate - 1.0 / 540.0).abs() < 1e-15);
        let l3 = LevelSpec::level(3).unwrap();
        assert_eq!((l3.n_trains, l3.width, l3.height, l3.n_cities), (50, 30, 35, 3));
        let l4 = LevelSpec::level(4).unwrap();
        assert_eq!((l4.n_trains, l4.width, l4.height, l4.n_cities), (80, 35, 30, 5));
        assert_eq!(l4.malfunction_duration, (20, 50));
        assert!(LevelSpec::level(5).is_err());
    }

    #[test]
    fn scenario_is_valid_and_deterministic() {
        let l = LevelSpec::level(1).unwrap();
        let a = generate_scenario(&l, 3, &TimetableParams::default()).unwrap();
        let b = generate_scenario(&l, 3, &TimetableParams::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.n_trains(), 10);
        assert_eq!(a.horizon().unwrap(), 520);
    }

    #[test]
    fn fractional_profile_stretches_horizon() {
        let l = LevelSpec::level(0).unwrap().with_speeds(SpeedProfile::half_slow());
        let sc = generate_scenario(&l, 1, &TimetableParams::default()).unwrap();
        assert_eq!(sc.horizon().unwrap(), 2 * 508);
        assert_eq!(sc.trains[1].speed, Speed::new(1, 2).unwrap());
        assert_eq!("fractional:1,1/2".parse::<SpeedProfile>().unwrap(), SpeedProfile::half_slow());
    }
}
