//! Demonstration selection: given a prediction task, a pool and a strategy,
//! return up to `k` ranked demonstration trajectories.
//!
//! Similarity is always computed against the task's context (the target is
//! unknown at prediction time) while candidates are compared in full. Ties are
//! broken by score, then more recent last check-in, then smaller trajectory id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CheckIn, DemonstrationPool, PoolScope, PredictionTask, Trajectory, TrajectoryId, UserId};
use crate::similarity::{self, Embedder, EmbeddingError, SimilarityError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("the time strategy requires user filtering")]
    TimeWithoutUserFilter,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unknown strategy {0:?} (expected random, embsim, dtw, jaccard, lcs or time)")]
    UnknownKind(String),
    #[error("embsim selection needs an embedding provider")]
    MissingEmbedder,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Kernel(#[from] SimilarityError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StrategyKind {
    Random { seed: u64 },
    EmbSim,
    Dtw,
    Jaccard,
    Lcs,
    Time,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Random { .. } => "random",
            StrategyKind::EmbSim => "embsim",
            StrategyKind::Dtw => "dtw",
            StrategyKind::Jaccard => "jaccard",
            StrategyKind::Lcs => "lcs",
            StrategyKind::Time => "time",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            StrategyKind::Random { .. } => "Random",
            StrategyKind::EmbSim => "EmbSim",
            StrategyKind::Dtw => "DTW",
            StrategyKind::Jaccard => "Jaccard",
            StrategyKind::Lcs => "LCS",
            StrategyKind::Time => "Time",
        }
    }

    pub fn direction(&self) -> ScoreDirection {
        match self {
            StrategyKind::Random { .. } => ScoreDirection::Unscored,
            StrategyKind::Dtw => ScoreDirection::LowerIsBetter,
            _ => ScoreDirection::HigherIsBetter,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, StrategyKind::Random { .. })
    }
}

/// Parses the CLI/config names. `random` gets seed 0; runs assign trial seeds.
impl FromStr for StrategyKind {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "random" => StrategyKind::Random { seed: 0 },
            "embsim" => StrategyKind::EmbSim,
            "dtw" => StrategyKind::Dtw,
            "jaccard" => StrategyKind::Jaccard,
            "lcs" => StrategyKind::Lcs,
            "time" => StrategyKind::Time,
            _ => return Err(SelectionError::UnknownKind(s.to_owned())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub user_filter: bool,
    pub k: usize,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, user_filter: bool, k: usize) -> Result<Self, SelectionError> {
        let spec = Self { kind, user_filter, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.k == 0 {
            return Err(SelectionError::ZeroK);
        }
        if self.kind == StrategyKind::Time && !self.user_filter {
            return Err(SelectionError::TimeWithoutUserFilter);
        }
        Ok(())
    }

    /// Name as used in result tables, e.g. `LCS+User`.
    pub fn label(&self) -> String {
        if self.user_filter {
            format!("{}+User", self.kind.display_name())
        } else {
            self.kind.display_name().to_owned()
        }
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (k={})", self.label(), self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    HigherIsBetter,
    LowerIsBetter,
    Unscored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The task has no context to compare against; candidates were ordered by
    /// recency instead.
    EmptyContextTimeOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDemo {
    pub trajectory_id: TrajectoryId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDemos {
    pub demos: Vec<RankedDemo>,
    pub direction: ScoreDirection,
    pub fallback: Option<Fallback>,
}

impl RankedDemos {
    pub fn empty(direction: ScoreDirection) -> Self {
        Self {
            demos: Vec::new(),
            direction,
            fallback: None,
        }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn ids(&self) -> Vec<TrajectoryId> {
        self.demos.iter().map(|d| d.trajectory_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Dtw,
    Jaccard,
    Lcs,
}

/// Restricts a pool to one user's trajectories. The result has `User` scope
/// and the same trajectories, in the same order, as building a user pool.
pub fn apply_user_filter(pool: &DemonstrationPool, user: UserId) -> DemonstrationPool {
    DemonstrationPool {
        scope: PoolScope::User(user),
        trajectories: pool
            .trajectories
            .iter()
            .filter(|t| t.user == user)
            .cloned()
            .collect(),
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of Random trial `trial` within a run.
pub fn trial_seed(run_seed: u64, trial: u32) -> u64 {
    mix_seed(run_seed, u64::from(trial) + 1)
}

/// Uniform sample of `k` candidates without replacement. Candidates are put
/// in id order first, so the result does not depend on input order.
pub fn rank_random(candidates: &[&Trajectory], k: usize, seed: u64) -> RankedDemos {
    let mut ids: Vec<TrajectoryId> = candidates.iter().map(|t| t.id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = ids.partial_shuffle(&mut rng, k.min(candidates.len()));
    RankedDemos {
        demos: chosen
            .iter()
            .map(|&trajectory_id| RankedDemo {
                trajectory_id,
                score: 0.0,
            })
            .collect(),
        direction: ScoreDirection::Unscored,
        fallback: None,
    }
}

/// Most recent trajectories first; score is the last check-in time in epoch
/// seconds. Equal times fall back to ascending id.
pub fn rank_time(candidates: &[&Trajectory], k: usize) -> RankedDemos {
    let scored = candidates
        .iter()
        .map(|t| (t.last_timestamp().timestamp() as f64, *t))
        .collect();
    top_k(scored, k, ScoreDirection::HigherIsBetter)
}

/// Exhaustively scores every candidate against `context` with `kernel`.
pub fn rank_by_kernel(
    context: &[CheckIn],
    candidates: &[&Trajectory],
    k: usize,
    kernel: Kernel,
) -> Result<RankedDemos, SelectionError> {
    let scored: Vec<(f64, &Trajectory)> = match kernel {
        Kernel::Dtw => {
            let geo: Vec<_> = context.iter().map(|c| c.geo).collect();
            candidates
                .iter()
                .map(|t| Ok((similarity::dtw_distance(&geo, &t.geo_seq())?, *t)))
                .collect::<Result<_, SimilarityError>>()?
        }
        Kernel::Jaccard => {
            let pois: Vec<_> = context.iter().map(|c| c.poi).collect();
            if pois.is_empty() {
                return Err(SimilarityError::EmptySequence.into());
            }
            let set = similarity::sorted_set(&pois);
            candidates
                .iter()
                .map(|t| (similarity::jaccard_sorted(&set, &similarity::sorted_set(&t.poi_ids())), *t))
                .collect()
        }
        Kernel::Lcs => {
            let pois: Vec<_> = context.iter().map(|c| c.poi).collect();
            candidates
                .iter()
                .map(|t| Ok((similarity::lcs_length(&pois, &t.poi_ids())? as f64, *t)))
                .collect::<Result<_, SimilarityError>>()?
        }
    };
    let direction = match kernel {
        Kernel::Dtw => ScoreDirection::LowerIsBetter,
        _ => ScoreDirection::HigherIsBetter,
    };
    Ok(top_k(scored, k, direction))
}

/// Cosine similarity between the task-context embedding and each candidate.
pub fn rank_embsim(
    task: &PredictionTask,
    candidates: &[&Trajectory],
    k: usize,
    embedder: &Embedder,
) -> Result<RankedDemos, SelectionError> {
    let query = embedder.embed_context(task)?;
    let scored = candidates
        .iter()
        .map(|t| {
            let v = embedder.embed_trajectory(t)?;
            Ok((similarity::cosine_similarity(&query, &v)?, *t))
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    Ok(top_k(scored, k, ScoreDirection::HigherIsBetter))
}

fn top_k(mut scored: Vec<(f64, &Trajectory)>, k: usize, direction: ScoreDirection) -> RankedDemos {
    let cmp = |a: &(f64, &Trajectory), b: &(f64, &Trajectory)| -> Ordering {
        let by_score = match direction {
            ScoreDirection::LowerIsBetter => a.0.total_cmp(&b.0),
            _ => b.0.total_cmp(&a.0),
        };
        by_score
            .then_with(|| b.1.last_timestamp().cmp(&a.1.last_timestamp()))
            .then_with(|| a.1.id.cmp(&b.1.id))
    };
    let k = k.min(scored.len());
    if k == 0 {
        return RankedDemos::empty(direction);
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    RankedDemos {
        demos: scored
            .into_iter()
            .map(|(score, t)| RankedDemo {
                trajectory_id: t.id,
                score,
            })
            .collect(),
        direction,
        fallback: None,
    }
}

/// Selection over one pool, with a user index for fast filtering.
pub struct Selector<'a> {
    pool: &'a DemonstrationPool,
    by_user: HashMap<UserId, Vec<usize>>,
    embedder: Option<&'a Embedder>,
}

impl<'a> Selector<'a> {
    pub fn new(pool: &'a DemonstrationPool) -> Self {
        let mut by_user: HashMap<UserId, Vec<usize>> = HashMap::new();
        for (i, t) in pool.trajectories.iter().enumerate() {
            by_user.entry(t.user).or_default().push(i);
        }
        Self {
            pool,
            by_user,
            embedder: None,
        }
    }

    pub fn with_embedder(mut self, embedder: &'a Embedder) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn pool(&self) -> &DemonstrationPool {
        self.pool
    }

    pub fn embedder(&self) -> Option<&'a Embedder> {
        self.embedder
    }

    /// Candidates for `task`: the (optionally user-filtered) pool minus the
    /// task's own trajectory.
    pub fn candidates(&self, task: &PredictionTask, user_filter: bool) -> Vec<&'a Trajectory> {
        let pool = self.pool;
        let keep = |t: &&'a Trajectory| t.id != task.trajectory_id;
        if user_filter {
            self.by_user
                .get(&task.user)
                .map(|idx| {
                    idx.iter()
                        .map(|&i| pool.trajectories[i].as_ref())
                        .filter(keep)
                        .collect()
                })
                .unwrap_or_default()
        } else {
            pool.trajectories
                .iter()
                .map(|t| t.as_ref())
                .filter(keep)
                .collect()
        }
    }

    /// Deterministic in (task, pool, spec). Random mixes the spec seed with
    /// the task id so each task draws independently.
    pub fn select(&self, task: &PredictionTask, spec: &StrategySpec) -> Result<RankedDemos, SelectionError> {
        spec.validate()?;
        if spec.kind == StrategyKind::EmbSim && self.embedder.is_none() {
            return Err(SelectionError::MissingEmbedder);
        }
        let candidates = self.candidates(task, spec.user_filter);
        if candidates.is_empty() {
            return Ok(RankedDemos::empty(spec.kind.direction()));
        }
        let kernel = match spec.kind {
            StrategyKind::Random { seed } => {
                let seed = mix_seed(seed, u64::from(task.trajectory_id.0));
                return Ok(rank_random(&candidates, spec.k, seed));
            }
            StrategyKind::Time => return Ok(rank_time(&candidates, spec.k)),
            StrategyKind::Dtw => Some(Kernel::Dtw),
            StrategyKind::Jaccard => Some(Kernel::Jaccard),
            StrategyKind::Lcs => Some(Kernel::Lcs),
            StrategyKind::EmbSim => None,
        };
        if task.context.is_empty() {
            let mut ranked = rank_time(&candidates, spec.k);
            ranked.fallback = Some(Fallback::EmptyContextTimeOrder);
            return Ok(ranked);
        }
        match kernel {
            Some(kernel) => rank_by_kernel(&task.context, &candidates, spec.k, kernel),
            None => rank_embsim(task, &candidates, spec.k, self.embedder.expect("checked above")),
        }
    }
}
