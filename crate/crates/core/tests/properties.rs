mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use railflow::control::{
    mads_mask, mapf_mask, masked_raw, ControlParams, Controller, ControllerConfig, Decision, HeuristicMads,
    HeuristicMapf, HierarchicalController, MadsAction, MadsPolicy, MapfAction, MapfPolicy, Query, Tick,
};
use railflow::error::Result;
use railflow::eval::{generate_scenario, run_episode, LevelSpec, SpeedProfile, TimetableParams};
use railflow::generator::{generate_map, GeneratorParams};
use railflow::grid::{Pose, RailGrid};
use railflow::obs::{DispatchObservation, RoutingObservation};
use railflow::path::{project_conflicts, shortest_route, top_k_routes};
use railflow::sim::{JointAction, RawAction, SimState, TrainStatus, World};

use common::*;

fn small_map(seed: u64) -> Option<RailGrid> {
    generate_map(&GeneratorParams::new(20, 20, 2, seed)).ok()
}

fn small_world(seed: u64, fractional: bool) -> Option<std::sync::Arc<World>> {
    let mut spec = LevelSpec::level(1).unwrap();
    spec.width = 20;
    spec.height = 20;
    spec.n_trains = 8;
    spec.custom = true;
    if fractional {
        spec = spec.with_speeds(SpeedProfile::half_slow());
    }
    let sc = generate_scenario(&spec, seed, &TimetableParams::default()).ok()?;
    World::new(sc).ok()
}

/// Random actions, but only from each train's unmasked options.
struct MaskedRandom(ChaCha8Rng);

impl Controller for MaskedRandom {
    fn name(&self) -> String {
        "masked-random".into()
    }

    fn act(&mut self, world: &World, state: &SimState) -> Result<JointAction> {
        let tick = Tick::new(world, state);
        let mut joint = vec![RawAction::Noop; world.n_trains()];
        for (i, slot) in joint.iter_mut().enumerate() {
            let st = state.trains[i].status;
            let d = if st.is_off_map() {
                let a = if self.0.gen_bool(0.3) { MadsAction::Dispatch } else { MadsAction::Wait };
                Decision::Mads(a)
            } else if st == TrainStatus::Active {
                Decision::Mapf(MapfAction::ALL[self.0.gen_range(0..3)])
            } else {
                continue;
            };
            *slot = masked_raw(world, state, &tick.obs, i, d)?;
        }
        Ok(joint)
    }
}

fn pick_pose(grid: &RailGrid, rng: &mut ChaCha8Rng) -> Pose {
    let poses = rail_poses(grid);
    poses[rng.gen_range(0..poses.len())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shortest_route_matches_bfs(seed in 0u64..10_000, pick in any::<u64>()) {
        let Some(grid) = small_map(seed) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let from = pick_pose(&grid, &mut rng);
        let to = pick_pose(&grid, &mut rng).cell;
        let route = shortest_route(&grid, from, to).unwrap();
        prop_assert_eq!(route.as_ref().map(|r| r.cost()), oracle_shortest(&grid, from, to));
        if let Some(r) = route {
            prop_assert!(r.is_transition_valid(&grid));
            prop_assert_eq!(r.first(), from);
            prop_assert_eq!(r.last().cell, to);
        }
    }

    #[test]
    fn top_k_matches_enumeration(rows in 2usize..5, cols in 3usize..7, holes in proptest::collection::vec(any::<bool>(), 42), pick in any::<u64>()) {
        // Small lattices with holes: rich in alternatives yet enumerable.
        let art: Vec<String> = (0..rows)
            .map(|r| (0..cols).map(|c| if holes[r * cols + c] && (r + c) % 3 == 1 { '.' } else { '#' }).collect())
            .collect();
        let refs: Vec<&str> = art.iter().map(|s| s.as_str()).collect();
        let grid = ascii_grid(&refs);
        let poses = rail_poses(&grid);
        prop_assume!(poses.len() > 1);
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let from = poses[rng.gen_range(0..poses.len())];
        let to = poses[rng.gen_range(0..poses.len())].cell;
        prop_assume!(from.cell != to);
        let k = 2;
        let top = top_k_routes(&grid, from, to, k).unwrap();
        let all = oracle_all_costs(&grid, from, to, 40, 200_000);
        prop_assume!(all.is_some());
        let all = all.unwrap();
        let costs: Vec<u32> = top.routes.iter().map(|r| r.cost()).collect();
        prop_assert_eq!(&costs[..], &all[..all.len().min(k)]);
        let distinct: HashSet<Vec<Pose>> = top.routes.iter().map(|r| r.poses.clone()).collect();
        prop_assert_eq!(distinct.len(), top.routes.len());
        for r in &top.routes {
            prop_assert!(r.is_transition_valid(&grid));
            prop_assert_eq!(r.last().cell, to);
        }
    }

    #[test]
    fn conflict_count_is_symmetric(seed in 0u64..10_000, pick in any::<u64>()) {
        let Some(grid) = small_map(seed) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let route = |rng: &mut ChaCha8Rng| shortest_route(&grid, pick_pose(&grid, rng), pick_pose(&grid, rng).cell).unwrap();
        let (Some(a), Some(b)) = (route(&mut rng), route(&mut rng)) else { return Ok(()) };
        let ab = project_conflicts(&a, &b, 100);
        let ba = project_conflicts(&b, &a, 100);
        prop_assert_eq!(ab.n_conflict_cells, ba.n_conflict_cells);
        if !ab.has_conflict() {
            prop_assert_eq!((ab.dist_self, ab.dist_other), (100, 100));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn occupancy_exclusive_and_statuses_monotone(seed in 0u64..5_000, fractional in any::<bool>()) {
        let Some(world) = small_world(seed, fractional) else { return Ok(()) };
        let mut ctl = MaskedRandom(ChaCha8Rng::seed_from_u64(seed));
        let mut s = world.reset(seed);
        let rank = |st: TrainStatus| match st {
            TrainStatus::WaitingOffMap => 0,
            TrainStatus::ReadyOffMap => 1,
            TrainStatus::Active => 2,
            TrainStatus::Arrived | TrainStatus::CancelledAtEnd => 3,
        };
        while !s.finished {
            let before: Vec<TrainStatus> = s.trains.iter().map(|t| t.status).collect();
            let a = ctl.act(&world, &s).unwrap();
            world.step(&mut s, &a).unwrap();
            let mut cells = HashSet::new();
            for (t, b) in s.trains.iter().zip(&before) {
                prop_assert!(rank(t.status) >= rank(*b));
                if t.status == TrainStatus::Active {
                    let p = t.pose.unwrap();
                    prop_assert!(world.grid().is_valid_pose(p));
                    prop_assert!(cells.insert(p.cell), "two trains on {:?}", p.cell);
                }
            }
            prop_assert!(s.clock <= s.t_max);
        }
    }

    #[test]
    fn masked_actions_leave_pose_unchanged(seed in 0u64..5_000) {
        let Some(world) = small_world(seed, false) else { return Ok(()) };
        let mut ctl = MaskedRandom(ChaCha8Rng::seed_from_u64(seed ^ 0x55));
        let mut s = world.reset(seed);
        let mut checked = 0;
        while !s.finished && checked < 300 {
            let tick = Tick::new(&world, &s);
            for i in 0..world.n_trains() {
                let st = s.trains[i].status;
                let masked: Vec<Decision> = if st.is_off_map() {
                    if mads_mask(&world, &s, i) { vec![] } else { vec![Decision::Mads(MadsAction::Dispatch)] }
                } else if st == TrainStatus::Active {
                    let (_, mask) = mapf_mask(&world, &s, &tick.obs, i);
                    MapfAction::ALL.iter().filter(|a| !mask[a.index()]).map(|a| Decision::Mapf(*a)).collect()
                } else {
                    vec![]
                };
                for d in masked {
                    let raw = masked_raw(&world, &s, &tick.obs, i, d).unwrap();
                    let mut joint = vec![RawAction::Noop; world.n_trains()];
                    joint[i] = raw;
                    let mut next = s.clone();
                    world.step(&mut next, &joint).unwrap();
                    prop_assert_eq!(next.trains[i].pose, s.trains[i].pose, "train {} {:?}", i, d);
                    checked += 1;
                }
            }
            let a = ctl.act(&world, &s).unwrap();
            world.step(&mut s, &a).unwrap();
        }
    }

    #[test]
    fn metrics_partition_the_fleet(seed in 0u64..5_000, fractional in any::<bool>()) {
        let Some(world) = small_world(seed, fractional) else { return Ok(()) };
        let mut ctl = MaskedRandom(ChaCha8Rng::seed_from_u64(seed));
        let run = run_episode(&world, &mut ctl, seed, &ControlParams::default()).unwrap();
        let m = run.metrics;
        let c = m.counts;
        prop_assert_eq!(c.arrived + c.deadlocked + c.cancelled + c.other, m.n_trains);
        let rates = m.success_rate + m.deadlock_rate + m.cancelled_rate + m.other_rate;
        prop_assert!((rates - 1.0).abs() < 1e-9);
        prop_assert!(m.arrival_delay >= 0.0 && m.arrival_delay <= m.t_max as f64);
        prop_assert_eq!(m.active_series.len() as u32, m.length);
    }
}

/// Wraps a policy so skip-eligible states get the implied default.
struct Defaulting<P>(P);

impl MadsPolicy for Defaulting<HeuristicMads> {
    fn name(&self) -> String {
        "defaulting".into()
    }

    fn decide(&self, q: &Query, obs: &DispatchObservation, rng: &mut ChaCha8Rng) -> Result<MadsAction> {
        if !mads_mask(q.world, q.state, q.train) {
            return Ok(MadsAction::Wait);
        }
        self.0.decide(q, obs, rng)
    }
}

impl MapfPolicy for Defaulting<HeuristicMapf> {
    fn name(&self) -> String {
        "defaulting".into()
    }

    fn decide(&self, q: &Query, obs: &RoutingObservation, rng: &mut ChaCha8Rng) -> Result<MapfAction> {
        if !mapf_mask(q.world, q.state, &q.tick.obs, q.train).0 {
            return Ok(MapfAction::Planned);
        }
        self.0.decide(q, obs, rng)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn skipping_changes_no_trace(seed in 0u64..5_000) {
        let Some(world) = small_world(seed, false) else { return Ok(()) };
        let p = ControlParams::default();
        let mut skipping = HierarchicalController::heuristic(p.conflict_window, p.stop_window);
        let mut everywhere = HierarchicalController::new(
            Box::new(Defaulting(HeuristicMads { window: p.conflict_window })),
            Box::new(Defaulting(HeuristicMapf { stop_window: p.stop_window })),
            ControllerConfig { skip: false, ..ControllerConfig::default() },
            seed,
        );
        let a = run_episode(&world, &mut skipping, seed, &p).unwrap().trace.ticks;
        let b = run_episode(&world, &mut everywhere, seed, &p).unwrap().trace.ticks;
        prop_assert!(a == b);
        prop_assert!(everywhere.queries.iter().sum::<u64>() >= skipping.queries.iter().sum::<u64>());
    }
}

