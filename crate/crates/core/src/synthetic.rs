//! Seeded synthetic check-in corpora.
//!
//! Users live in regions that share a set of POIs. Each user repeats a few
//! routines (fixed POI sequences); every visit keeps the routine's POI with
//! probability `repeat_prob` and otherwise goes to a random POI of the region.
//! The structure gives trajectory-similarity selection something to find.

use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    CheckIn, DemonstrationPool, GeoPoint, ParsedCheckins, PoiId, PoolScope, PredictionTask, Trajectory,
    TrajectoryId, UserId, Vocabulary,
};

const CATEGORIES: &[&str] = &[
    "Coffee Shop",
    "Office",
    "Gym / Fitness Center",
    "Train Station",
    "Department Store",
    "Bar",
    "Park",
    "Home (private)",
    "Bus Station",
    "American Restaurant",
    "University",
    "Grocery Store",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub users_per_region: usize,
    pub pois_per_region: usize,
    pub routines_per_user: usize,
    pub min_routine_len: usize,
    pub max_routine_len: usize,
    pub trajectories_per_user: usize,
    pub repeat_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 200,
            users_per_region: 10,
            pois_per_region: 60,
            routines_per_user: 3,
            min_routine_len: 4,
            max_routine_len: 7,
            trajectories_per_user: 10,
            repeat_prob: 0.7,
            seed: 7,
        }
    }
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2012, 4, 2, 0, 0, 0).single().expect("valid date")
}

fn poi_geo(region: usize, local: usize) -> GeoPoint {
    let lat = 40.0 + region as f64 * 0.05 + (local % 8) as f64 * 0.002;
    let lon = -74.0 + region as f64 * 0.05 + (local / 8) as f64 * 0.002;
    GeoPoint::new(lat, lon).expect("in range")
}

struct Routine {
    pois: Vec<usize>,
    start_hour: i64,
    steps_min: Vec<i64>,
}

/// Generates a corpus as if it had been parsed from a check-in file.
pub fn generate(config: &SyntheticConfig) -> ParsedCheckins {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let regions = config.users.div_ceil(config.users_per_region.max(1));
    let total_pois = regions * config.pois_per_region;
    let pois = Vocabulary::from_raw((0..total_pois).map(|p| format!("p{p}")).collect());
    let users = Vocabulary::from_raw((0..config.users).map(|u| format!("u{u}")).collect());
    let category = |p: usize| CATEGORIES[(p * 7 + p / 5) % CATEGORIES.len()].to_owned();

    let mut checkins = Vec::new();
    for u in 0..config.users {
        let region = u / config.users_per_region.max(1);
        let base = region * config.pois_per_region;
        let routines: Vec<Routine> = (0..config.routines_per_user)
            .map(|_| {
                let len = rng.random_range(config.min_routine_len..=config.max_routine_len);
                Routine {
                    pois: (0..len).map(|_| base + rng.random_range(0..config.pois_per_region)).collect(),
                    start_hour: rng.random_range(6..12),
                    steps_min: (0..len).map(|_| rng.random_range(60..=300)).collect(),
                }
            })
            .collect();
        for t in 0..config.trajectories_per_user {
            let routine = &routines[rng.random_range(0..routines.len())];
            let day = epoch() + Duration::days(3 * t as i64 + (u % 3) as i64);
            let mut ts = day + Duration::hours(routine.start_hour) + Duration::minutes(rng.random_range(0..30));
            for (i, &planned) in routine.pois.iter().enumerate() {
                let poi = if rng.random_bool(config.repeat_prob) {
                    planned
                } else {
                    base + rng.random_range(0..config.pois_per_region)
                };
                if i > 0 {
                    ts += Duration::minutes(routine.steps_min[i] + rng.random_range(-20..=20));
                }
                checkins.push(CheckIn {
                    user: UserId(u as u32),
                    poi: PoiId(poi as u32),
                    category: category(poi),
                    timestamp: ts,
                    geo: poi_geo(region, poi - base),
                });
            }
        }
    }
    ParsedCheckins {
        checkins,
        errors: Vec::new(),
        users,
        pois,
    }
}

/// A large demonstration pool plus held-out tasks, used to measure selection cost.
#[derive(Clone, Debug)]
pub struct BenchCorpus {
    pub pool: DemonstrationPool,
    pub tasks: Vec<PredictionTask>,
}

/// `pool_size` trajectories of uniformly random length in
/// `[mean_len / 2, 3 * mean_len / 2]`, spread over `users` users.
pub fn bench_corpus(pool_size: usize, mean_len: usize, tasks: usize, users: usize, seed: u64) -> BenchCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poi_count = 5_000u32;
    let users = users.max(1);
    let make = |rng: &mut ChaCha8Rng, id: u32, user: u32, len: usize| -> Trajectory {
        let start = epoch() + Duration::days(id as i64 * 2);
        let checkins = (0..len)
            .map(|i| {
                let poi = rng.random_range(0..poi_count);
                CheckIn {
                    user: UserId(user),
                    poi: PoiId(poi),
                    category: CATEGORIES[poi as usize % CATEGORIES.len()].to_owned(),
                    timestamp: start + Duration::minutes(10 * i as i64),
                    geo: poi_geo((poi / 100) as usize, (poi % 100) as usize),
                }
            })
            .collect();
        Trajectory::new(TrajectoryId(id), checkins).expect("ordered single-user trajectory")
    };
    let (lo, hi) = (mean_len / 2, mean_len + mean_len / 2);
    let trajectories: Vec<Arc<Trajectory>> = (0..pool_size as u32)
        .map(|id| {
            let len = rng.random_range(lo.max(1)..=hi.max(1));
            Arc::new(make(&mut rng, id, id % users as u32, len))
        })
        .collect();
    let tasks = (0..tasks as u32)
        .map(|i| {
            let id = pool_size as u32 + i;
            let len = rng.random_range(lo.max(2)..=hi.max(2));
            PredictionTask::from_trajectory(&make(&mut rng, id, i % users as u32, len))
        })
        .collect();
    BenchCorpus {
        pool: DemonstrationPool {
            scope: PoolScope::All,
            trajectories,
        },
        tasks,
    }
}
