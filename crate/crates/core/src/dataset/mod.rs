//! Check-in data: ingestion, segmentation into trajectories, chronological
//! train/test splitting and demonstration pools.
//!
//! Raw user and POI identifiers are remapped to dense integer ids at ingestion
//! ([`Vocabulary`]); the original strings are kept for reporting and for the
//! canonical dataset archive.

mod archive;
mod ingest;
mod segment;
mod split;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{read_archive, write_archive, ArchiveHeader, DATASET_SCHEMA, DATASET_SCHEMA_VERSION};
pub use ingest::{parse_checkins, ColumnMap, FormatDescriptor, ParsedCheckins, RowError, TimestampFormat};
pub use segment::{segment_all, segment_history, DEFAULT_GAP};
pub use split::{build_pool, dataset_stats, split_dataset, DatasetStats, SplitPolicy};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unreadable source: {0}")]
    Source(#[from] csv::Error),
    #[error("coordinates out of bounds: lat={lat}, lon={lon}")]
    Coordinates { lat: f64, lon: f64 },
    #[error("check-ins are not sorted by timestamp at position {0}")]
    Unsorted(usize),
    #[error("check-ins belong to more than one user")]
    MixedUsers,
    #[error("a trajectory needs at least one check-in")]
    EmptyTrajectory,
    #[error("split ratio must lie in (0, 1), got {0}")]
    Ratio(f64),
    #[error("cannot split an empty trajectory list")]
    EmptyInput,
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("dataset archive line {line}: {message}")]
    Archive { line: usize, message: String },
    #[error("dataset archive schema mismatch: expected {expected} v{expected_version}, found {found} v{found_version}")]
    SchemaMismatch {
        expected: String,
        expected_version: u32,
        found: String,
        found_version: u32,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Dense user id assigned at ingestion.
    UserId
);
dense_id!(
    /// Dense POI id assigned at ingestion. This is the id shown to the LLM.
    PoiId
);
dense_id!(
    /// Stable trajectory id, unique across the whole dataset.
    TrajectoryId
);

/// Latitude/longitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DatasetError::Coordinates { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// One visit event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user: UserId,
    pub poi: PoiId,
    pub category: String,
    #[serde(with = "chrono::serde::ts_seconds")]
    pub timestamp: DateTime<Utc>,
    pub geo: GeoPoint,
}

/// A user's consecutive check-ins within one activity period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: TrajectoryId,
    pub user: UserId,
    checkins: Vec<CheckIn>,
}

impl Trajectory {
    /// Builds a trajectory, checking that it is non-empty, single-user and
    /// ordered by timestamp. The gap rule is enforced by segmentation, not here.
    pub fn new(id: TrajectoryId, checkins: Vec<CheckIn>) -> Result<Self> {
        let first = checkins.first().ok_or(DatasetError::EmptyTrajectory)?;
        let user = first.user;
        if checkins.iter().any(|c| c.user != user) {
            return Err(DatasetError::MixedUsers);
        }
        if let Some(i) = checkins
            .windows(2)
            .position(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(DatasetError::Unsorted(i + 1));
        }
        Ok(Self { id, user, checkins })
    }

    pub fn checkins(&self) -> &[CheckIn] {
        &self.checkins
    }

    pub fn len(&self) -> usize {
        self.checkins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkins.is_empty()
    }

    pub fn last(&self) -> &CheckIn {
        // Non-empty by construction.
        &self.checkins[self.checkins.len() - 1]
    }

    pub fn first_timestamp(&self) -> DateTime<Utc> {
        self.checkins[0].timestamp
    }

    pub fn last_timestamp(&self) -> DateTime<Utc> {
        self.last().timestamp
    }

    pub fn poi_ids(&self) -> Vec<PoiId> {
        self.checkins.iter().map(|c| c.poi).collect()
    }

    pub fn geo_seq(&self) -> Vec<GeoPoint> {
        self.checkins.iter().map(|c| c.geo).collect()
    }

    pub fn into_checkins(self) -> Vec<CheckIn> {
        self.checkins
    }
}

/// A test trajectory split into an observed context and a hidden target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTask {
    pub trajectory_id: TrajectoryId,
    pub user: UserId,
    /// All check-ins but the last. May be empty for length-1 trajectories.
    pub context: Vec<CheckIn>,
    #[serde(with = "chrono::serde::ts_seconds")]
    pub target_time: DateTime<Utc>,
    /// Ground truth. Never rendered into a prompt.
    pub target_poi: PoiId,
    pub target_category: String,
    pub target_geo: GeoPoint,
}

impl PredictionTask {
    pub fn from_trajectory(trajectory: &Trajectory) -> Self {
        let (target, context) = trajectory
            .checkins()
            .split_last()
            .expect("trajectory is non-empty");
        Self {
            trajectory_id: trajectory.id,
            user: trajectory.user,
            context: context.to_vec(),
            target_time: target.timestamp,
            target_poi: target.poi,
            target_category: target.category.clone(),
            target_geo: target.geo,
        }
    }

    /// Number of observed (current) check-ins.
    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    /// Rebuilds the source trajectory from context and target.
    pub fn reconstruct(&self) -> Trajectory {
        let mut checkins = self.context.clone();
        checkins.push(CheckIn {
            user: self.user,
            poi: self.target_poi,
            category: self.target_category.clone(),
            timestamp: self.target_time,
            geo: self.target_geo,
        });
        Trajectory {
            id: self.trajectory_id,
            user: self.user,
            checkins,
        }
    }
}

/// Train trajectories plus the prediction tasks built from test trajectories.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Arc<Trajectory>>,
    pub test_tasks: Vec<PredictionTask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    All,
    User(UserId),
}

impl PoolScope {
    pub fn label(&self) -> &'static str {
        match self {
            PoolScope::All => "all",
            PoolScope::User(_) => "user",
        }
    }
}

/// Candidate demonstrations, always drawn from the train split.
#[derive(Clone, Debug)]
pub struct DemonstrationPool {
    pub scope: PoolScope,
    pub trajectories: Vec<Arc<Trajectory>>,
}

impl DemonstrationPool {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: TrajectoryId) -> Option<&Arc<Trajectory>> {
        self.trajectories.iter().find(|t| t.id == id)
    }
}

/// Dense id assignment in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = u32::try_from(self.raw.len()).expect("more than u32::MAX distinct ids");
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        self.raw.get(id as usize).map(String::as_str)
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn from_raw(raw: Vec<String>) -> Self {
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { raw, index }
    }

    pub fn as_slice(&self) -> &[String] {
        &self.raw
    }
}

/// A fully preprocessed dataset: split, id vocabularies and the settings that
/// produced it.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub name: String,
    pub split: DatasetSplit,
    pub users: Vocabulary,
    pub pois: Vocabulary,
    /// Offset applied to UTC timestamps when rendering wall-clock times.
    pub render_offset_minutes: i32,
    pub gap_seconds: i64,
    pub train_ratio: f64,
}

impl PreparedDataset {
    /// Ingests raw check-ins and runs the full pipeline: segmentation,
    /// chronological split and task construction.
    pub fn prepare(
        name: impl Into<String>,
        parsed: ParsedCheckins,
        gap: chrono::Duration,
        policy: SplitPolicy,
        render_offset_minutes: i32,
    ) -> Result<Self> {
        let trajectories = segment_all(&parsed.checkins, gap)?;
        let split = split_dataset(trajectories, policy)?;
        Ok(Self {
            name: name.into(),
            split,
            users: parsed.users,
            pois: parsed.pois,
            render_offset_minutes,
            gap_seconds: gap.num_seconds(),
            train_ratio: policy.train_ratio,
        })
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.split)
    }

    pub fn all_pool(&self) -> DemonstrationPool {
        build_pool(&self.split, PoolScope::All).expect("All scope never fails")
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn geo_bounds() {
        assert!(GeoPoint::new(90.0, -180.0).is_ok());
        assert!(GeoPoint::new(90.1, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.5).is_err());
    }

    #[test]
    fn trajectory_invariants() {
        assert!(matches!(
            Trajectory::new(TrajectoryId(0), vec![]),
            Err(DatasetError::EmptyTrajectory)
        ));
        assert!(matches!(
            Trajectory::new(TrajectoryId(0), vec![checkin(0, 1, 0), checkin(1, 2, 1)]),
            Err(DatasetError::MixedUsers)
        ));
        assert!(matches!(
            Trajectory::new(TrajectoryId(0), vec![checkin(0, 1, 5), checkin(0, 2, 1)]),
            Err(DatasetError::Unsorted(1))
        ));
    }

    #[test]
    fn task_reconstructs_trajectory() {
        let t = trajectory(3, 1, &[(4, 0), (5, 2), (6, 3)]);
        let task = PredictionTask::from_trajectory(&t);
        assert_eq!(task.context.len(), 2);
        assert_eq!(task.target_poi, PoiId(6));
        assert!(task.target_time >= task.context.last().unwrap().timestamp);
        assert_eq!(task.reconstruct(), t);

        let single = trajectory(4, 1, &[(9, 0)]);
        let task = PredictionTask::from_trajectory(&single);
        assert!(task.context.is_empty());
        assert_eq!(task.reconstruct(), single);
    }

    #[test]
    fn vocabulary_is_first_seen_dense() {
        let mut v = Vocabulary::default();
        assert_eq!(v.intern("b"), 0);
        assert_eq!(v.intern("a"), 1);
        assert_eq!(v.intern("b"), 0);
        assert_eq!(v.raw(1), Some("a"));
        assert_eq!(Vocabulary::from_raw(v.as_slice().to_vec()), v);
    }
}
