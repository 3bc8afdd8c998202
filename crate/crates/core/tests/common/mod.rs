#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use poi_icl::dataset::{CheckIn, GeoPoint, PoiId, PredictionTask, Trajectory, TrajectoryId, UserId};
use poi_icl::selection::{RankedDemo, RankedDemos, ScoreDirection};

/// New York wall-clock offset (EDT) used by the prompt fixture.
pub const NYC_OFFSET_MINUTES: i32 = -240;

/// Local (EDT) wall-clock time in April 2012, as UTC.
fn local(day: u32, hour: u32, minute: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2012, 4, day, hour, minute, 0).unwrap() + chrono::Duration::minutes(240)
}

fn checkin(poi: u32, category: &str, at: DateTime<Utc>) -> CheckIn {
    CheckIn {
        user: UserId(1),
        poi: PoiId(poi),
        category: category.to_owned(),
        timestamp: at,
        geo: GeoPoint::new(40.75, -73.98).unwrap(),
    }
}

pub struct PromptFixture {
    pub task: PredictionTask,
    pub demos: RankedDemos,
    pub lookup: HashMap<TrajectoryId, Arc<Trajectory>>,
}

/// Two demonstrations and one task behind the reference prompt (April 11,
/// 2012 was a Wednesday).
pub fn reference_fixture() -> PromptFixture {
    let demo1 = Trajectory::new(
        TrajectoryId(10),
        vec![
            checkin(2436, "Train Station", local(11, 13, 22)),
            checkin(3544, "Gym / Fitness Center", local(12, 9, 8)),
            checkin(3824, "Department Store", local(12, 12, 13)),
        ],
    )
    .unwrap();
    // The last check-in is 01:30 UTC Tuesday but 21:30 Monday in New York.
    let demo2 = Trajectory::new(
        TrajectoryId(4),
        vec![
            checkin(17, "Office", local(9, 8, 5)),
            checkin(2436, "Train Station", local(9, 18, 47)),
            checkin(55, "Bar", local(9, 21, 30)),
        ],
    )
    .unwrap();
    let current = Trajectory::new(
        TrajectoryId(99),
        vec![
            checkin(480, "Department Store", local(11, 12, 39)),
            checkin(1218, "Coffee Shop", local(11, 14, 52)),
            checkin(3824, "Department Store", local(12, 10, 13)),
        ],
    )
    .unwrap();
    let demos = RankedDemos {
        demos: vec![
            RankedDemo {
                trajectory_id: demo1.id,
                score: 2.0,
            },
            RankedDemo {
                trajectory_id: demo2.id,
                score: 1.0,
            },
        ],
        direction: ScoreDirection::HigherIsBetter,
        fallback: None,
    };
    let lookup = [demo1, demo2].into_iter().map(|t| (t.id, Arc::new(t))).collect();
    PromptFixture {
        task: PredictionTask::from_trajectory(&current),
        demos,
        lookup,
    }
}
