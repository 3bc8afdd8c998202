//! Canonical dataset archive: a JSON-lines file with one header line followed
//! by one record per trajectory, so runs never need to re-ingest raw data.

use std::io::{BufRead, Write};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{
    CheckIn, DatasetError, DatasetSplit, GeoPoint, PoiId, PredictionTask, PreparedDataset, Result,
    Trajectory, TrajectoryId, UserId, Vocabulary,
};

pub const DATASET_SCHEMA: &str = "poi-icl.dataset";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub schema: String,
    pub version: u32,
    pub name: String,
    pub gap_seconds: i64,
    pub train_ratio: f64,
    pub render_offset_minutes: i32,
    pub users: Vec<String>,
    pub pois: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Part {
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct ArchivedCheckIn {
    poi: PoiId,
    category: String,
    #[serde(with = "chrono::serde::ts_seconds")]
    ts: DateTime<Utc>,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct ArchivedTrajectory {
    id: TrajectoryId,
    user: UserId,
    part: Part,
    checkins: Vec<ArchivedCheckIn>,
}

impl ArchivedTrajectory {
    fn new(t: &Trajectory, part: Part) -> Self {
        Self {
            id: t.id,
            user: t.user,
            part,
            checkins: t
                .checkins()
                .iter()
                .map(|c| ArchivedCheckIn {
                    poi: c.poi,
                    category: c.category.clone(),
                    ts: c.timestamp,
                    lat: c.geo.lat,
                    lon: c.geo.lon,
                })
                .collect(),
        }
    }

    fn into_trajectory(self) -> Result<Trajectory> {
        let user = self.user;
        let checkins = self
            .checkins
            .into_iter()
            .map(|c| {
                Ok(CheckIn {
                    user,
                    poi: c.poi,
                    category: c.category,
                    timestamp: c.ts,
                    geo: GeoPoint::new(c.lat, c.lon)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.id, checkins)
    }
}

/// Writes trajectories in id order (train and test interleaved), which makes
/// the output a pure function of the dataset.
pub fn write_archive<W: Write>(dataset: &PreparedDataset, mut out: W) -> Result<()> {
    let header = ArchiveHeader {
        schema: DATASET_SCHEMA.to_owned(),
        version: DATASET_SCHEMA_VERSION,
        name: dataset.name.clone(),
        gap_seconds: dataset.gap_seconds,
        train_ratio: dataset.train_ratio,
        render_offset_minutes: dataset.render_offset_minutes,
        users: dataset.users.as_slice().to_vec(),
        pois: dataset.pois.as_slice().to_vec(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;

    let mut records: Vec<ArchivedTrajectory> = dataset
        .split
        .train
        .iter()
        .map(|t| ArchivedTrajectory::new(t, Part::Train))
        .chain(
            dataset
                .split
                .test_tasks
                .iter()
                .map(|task| ArchivedTrajectory::new(&task.reconstruct(), Part::Test)),
        )
        .collect();
    records.sort_by_key(|r| r.id);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_archive<R: BufRead>(input: R) -> Result<PreparedDataset> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(DatasetError::Archive {
        line: 1,
        message: "empty archive".into(),
    })?;
    let header: ArchiveHeader = serde_json::from_str(&first?).map_err(|e| DatasetError::Archive {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_SCHEMA_VERSION {
        return Err(DatasetError::SchemaMismatch {
            expected: DATASET_SCHEMA.into(),
            expected_version: DATASET_SCHEMA_VERSION,
            found: header.schema,
            found_version: header.version,
        });
    }

    let mut split = DatasetSplit::default();
    for (i, line) in lines {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ArchivedTrajectory =
            serde_json::from_str(&line).map_err(|e| DatasetError::Archive {
                line: line_no,
                message: e.to_string(),
            })?;
        let is_test = matches!(record.part, Part::Test);
        let trajectory = record.into_trajectory().map_err(|e| DatasetError::Archive {
            line: line_no,
            message: e.to_string(),
        })?;
        if is_test {
            split
                .test_tasks
                .push(PredictionTask::from_trajectory(&trajectory));
        } else {
            split.train.push(Arc::new(trajectory));
        }
    }
    Ok(PreparedDataset {
        name: header.name,
        split,
        users: Vocabulary::from_raw(header.users),
        pois: Vocabulary::from_raw(header.pois),
        render_offset_minutes: header.render_offset_minutes,
        gap_seconds: header.gap_seconds,
        train_ratio: header.train_ratio,
    })
}
