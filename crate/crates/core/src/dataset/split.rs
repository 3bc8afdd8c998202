use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    DatasetError, DatasetSplit, DemonstrationPool, PoolScope, PredictionTask, Result, Trajectory,
    UserId,
};

/// Per-user chronological split: the earliest `train_ratio` share of each
/// user's trajectories (at least one) goes to train, the rest to test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_ratio: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { train_ratio: 0.8 }
    }
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.train_ratio > 0.0 && self.train_ratio < 1.0 {
            Ok(())
        } else {
            Err(DatasetError::Ratio(self.train_ratio))
        }
    }

    fn train_count(&self, n: usize) -> usize {
        // The epsilon absorbs representation error, e.g. 5 * 0.8.
        let raw = (n as f64 * self.train_ratio + 1e-9).floor() as usize;
        raw.clamp(1, n)
    }
}

pub fn split_dataset(trajectories: Vec<Trajectory>, policy: SplitPolicy) -> Result<DatasetSplit> {
    policy.validate()?;
    if trajectories.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let mut by_user: BTreeMap<UserId, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        by_user.entry(t.user).or_default().push(t);
    }
    let mut split = DatasetSplit::default();
    for (_, mut history) in by_user {
        history.sort_by_key(|t| (t.first_timestamp(), t.id));
        let n_train = policy.train_count(history.len());
        let test = history.split_off(n_train);
        split
            .test_tasks
            .extend(test.iter().map(PredictionTask::from_trajectory));
        split.train.extend(history.into_iter().map(Arc::new));
    }
    Ok(split)
}

/// `All` returns every train trajectory; `User(u)` exactly `u`'s.
pub fn build_pool(split: &DatasetSplit, scope: PoolScope) -> Result<DemonstrationPool> {
    let trajectories = match scope {
        PoolScope::All => split.train.clone(),
        PoolScope::User(user) => {
            let own: Vec<_> = split
                .train
                .iter()
                .filter(|t| t.user == user)
                .cloned()
                .collect();
            if own.is_empty() {
                return Err(DatasetError::UnknownUser(user));
            }
            own
        }
    };
    Ok(DemonstrationPool {
        scope,
        trajectories,
    })
}

/// Dataset summary in the shape of the usual benchmark statistics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub test_instances: usize,
    pub train_trajectories: usize,
    /// Train trajectories per user.
    pub avg_history_per_user: f64,
}

pub fn dataset_stats(split: &DatasetSplit) -> DatasetStats {
    let mut users = HashSet::new();
    let mut pois = HashSet::new();
    for t in &split.train {
        users.insert(t.user);
        pois.extend(t.checkins().iter().map(|c| c.poi));
    }
    for task in &split.test_tasks {
        users.insert(task.user);
        pois.insert(task.target_poi);
        pois.extend(task.context.iter().map(|c| c.poi));
    }
    let avg = if users.is_empty() {
        0.0
    } else {
        split.train.len() as f64 / users.len() as f64
    };
    DatasetStats {
        users: users.len(),
        pois: pois.len(),
        test_instances: split.test_tasks.len(),
        train_trajectories: split.train.len(),
        avg_history_per_user: avg,
    }
}
