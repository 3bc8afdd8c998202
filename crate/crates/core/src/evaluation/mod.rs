//! Metrics, significance tests and analyses over per-instance records.
//!
//! Everything here is a pure fold over [`EvalRecord`]s, so reports can be
//! rebuilt from archives without touching a backend.

mod archive;
mod bench;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use thiserror::Error;

use crate::dataset::{PoiId, TrajectoryId, UserId};
use crate::llm_gateway::{ParseStatus, Prediction};
use crate::selection::{Fallback, RankedDemo, StrategySpec};

pub use archive::{
    append_record, load_records, read_records, write_header, write_records, RecordArchive, RecordsHeader, RECORDS_SCHEMA,
    RECORDS_SCHEMA_VERSION,
};
pub use bench::{bench_selection, BenchOptions, BenchReport, BenchRow};
pub use report::{build_report, Report, ReportCell, ReportMeta, Significance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("a series has zero variance")]
    ZeroVariance,
    #[error("outcomes cannot be paired: {0}")]
    Unpaired(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("archive line {line}: {message}")]
    Archive { line: usize, message: String },
    #[error("archive schema mismatch: expected {expected} v{expected_version}, found {found} v{found_version}")]
    SchemaMismatch {
        expected: String,
        expected_version: u32,
        found: String,
        found_version: u32,
    },
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Outcome of one (strategy, k, trial, task) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub model: String,
    pub task_id: TrajectoryId,
    pub user: UserId,
    pub strategy: StrategySpec,
    pub trial: u32,
    pub demos: Vec<RankedDemo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Fallback>,
    pub target_poi: PoiId,
    pub target_poi_in_demos: usize,
    pub prediction: Prediction,
    pub correct: bool,
    pub selection_time_us: f64,
    pub llm_latency_ms: f64,
    pub template_version: String,
    pub context_len: usize,
}

impl EvalRecord {
    /// `correct` is derived, never taken from the backend.
    pub fn is_correct(prediction: &Prediction, target: PoiId) -> bool {
        prediction.place_id == Some(target)
    }

    pub fn scope(&self) -> &'static str {
        if self.strategy.user_filter {
            "User"
        } else {
            "All"
        }
    }

    /// Identity within a run, used for resuming.
    pub fn key(&self) -> RecordKey {
        RecordKey {
            user_filter: self.strategy.user_filter,
            strategy: self.strategy.kind.name().to_owned(),
            k: self.strategy.k,
            trial: self.trial,
            task_id: self.task_id,
        }
    }

    /// Grouping key for one method: everything but the task and trial.
    pub fn method(&self) -> MethodKey {
        MethodKey {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            scope: self.scope().to_owned(),
            strategy: self.strategy.kind.display_name().to_owned(),
            k: self.strategy.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub user_filter: bool,
    pub strategy: String,
    pub k: usize,
    pub trial: u32,
    pub task_id: TrajectoryId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodKey {
    pub dataset: String,
    pub model: String,
    pub scope: String,
    pub strategy: String,
    pub k: usize,
}

impl MethodKey {
    pub fn label(&self) -> String {
        if self.scope == "User" {
            format!("{}+User", self.strategy)
        } else {
            self.strategy.clone()
        }
    }
}

/// Groups records by method, preserving nothing about input order.
pub fn group_by_method<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> BTreeMap<MethodKey, Vec<&'a EvalRecord>> {
    let mut groups: BTreeMap<MethodKey, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.method()).or_default().push(r);
    }
    groups
}

fn mean_over_trials(records: &[&EvalRecord], value: impl Fn(&EvalRecord) -> f64) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut trials: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = trials.entry(r.trial).or_default();
        e.0 += value(r);
        e.1 += 1;
    }
    Ok(trials.values().map(|(sum, n)| sum / *n as f64).sum::<f64>() / trials.len() as f64)
}

/// Fraction correct. With several trials (Random), each trial's accuracy is
/// computed first and the trial accuracies are averaged.
pub fn acc_at_1(records: &[&EvalRecord]) -> Result<f64> {
    mean_over_trials(records, |r| f64::from(u8::from(r.correct)))
}

/// Mean number of demonstrations ending at the target POI, averaged per trial.
pub fn mean_target_in_demos(records: &[&EvalRecord]) -> Result<f64> {
    mean_over_trials(records, |r| r.target_poi_in_demos as f64)
}

pub fn mean_selection_us(records: &[&EvalRecord]) -> Result<f64> {
    mean_over_trials(records, |r| r.selection_time_us)
}

/// Records whose response could not be parsed; they count as incorrect.
pub fn failed_parses(records: &[&EvalRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.prediction.parse_status == ParseStatus::Failed)
        .count()
}

/// Correctness of two methods over the same tasks, aligned by task id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairedOutcomes {
    pub task_ids: Vec<TrajectoryId>,
    pub a: Vec<bool>,
    pub b: Vec<bool>,
}

fn by_task(records: &[&EvalRecord]) -> BTreeMap<TrajectoryId, bool> {
    // Multi-trial methods are paired on their first trial.
    let mut out: BTreeMap<TrajectoryId, (u32, bool)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.task_id).or_insert((r.trial, r.correct));
        if r.trial < e.0 {
            *e = (r.trial, r.correct);
        }
    }
    out.into_iter().map(|(id, (_, c))| (id, c)).collect()
}

impl PairedOutcomes {
    /// Pairs two methods. Both must cover exactly the same task ids.
    pub fn pair(a: &[&EvalRecord], b: &[&EvalRecord]) -> Result<Self> {
        let (ma, mb) = (by_task(a), by_task(b));
        if ma.len() != mb.len() || ma.keys().ne(mb.keys()) {
            return Err(EvalError::Unpaired(format!(
                "task sets differ ({} vs {} tasks)",
                ma.len(),
                mb.len()
            )));
        }
        Ok(Self {
            task_ids: ma.keys().copied().collect(),
            a: ma.values().copied().collect(),
            b: mb.values().copied().collect(),
        })
    }

    pub fn from_bools(a: Vec<bool>, b: Vec<bool>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(EvalError::LengthMismatch(a.len(), b.len()));
        }
        Ok(Self {
            task_ids: (0..a.len() as u32).map(TrajectoryId).collect(),
            a,
            b,
        })
    }

    /// (A right and B wrong, A wrong and B right).
    pub fn discordant(&self) -> (u64, u64) {
        self.a.iter().zip(&self.b).fold((0, 0), |(b, c), (&x, &y)| match (x, y) {
            (true, false) => (b + 1, c),
            (false, true) => (b, c + 1),
            _ => (b, c),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    /// Exact binomial below `EXACT_BELOW` discordant pairs, chi-square above.
    #[default]
    Auto,
    Exact,
    ChiSquare,
}

pub const EXACT_BELOW: u64 = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: u64,
    pub c: u64,
    pub p_value: f64,
}

/// Two-sided exact binomial p for `b` vs `c` discordant pairs.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * dist.cdf(b.min(c))).min(1.0)
}

/// Continuity-corrected chi-square p (one degree of freedom).
pub fn mcnemar_chi_square(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let diff = (b.abs_diff(c) as f64 - 1.0).max(0.0);
    let stat = diff * diff / n as f64;
    ChiSquared::new(1.0).expect("valid dof").sf(stat)
}

pub fn mcnemar_test(outcomes: &PairedOutcomes, method: McNemarMethod) -> McNemarResult {
    let (b, c) = outcomes.discordant();
    let p_value = match method {
        McNemarMethod::Exact => mcnemar_exact(b, c),
        McNemarMethod::ChiSquare => mcnemar_chi_square(b, c),
        McNemarMethod::Auto if b + c < EXACT_BELOW => mcnemar_exact(b, c),
        McNemarMethod::Auto => mcnemar_chi_square(b, c),
    };
    McNemarResult { b, c, p_value }
}

/// Sample Pearson correlation.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooShort(xs.len()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionRow {
    pub dataset: String,
    pub model: String,
    pub scope: String,
    pub strategy: String,
    pub k: usize,
    pub mean_target_in_demos: f64,
    pub acc_at_1: f64,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionCorrelation {
    pub dataset: String,
    pub model: String,
    pub k: usize,
    pub strategies: usize,
    /// `None` with fewer than two strategies or constant series.
    pub pearson_r: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InclusionAnalysis {
    pub rows: Vec<InclusionRow>,
    pub correlations: Vec<InclusionCorrelation>,
}

/// Per-method mean of target-in-demonstration counts and, for each
/// (dataset, model, k), the correlation of that mean with ACC@1 across methods.
pub fn inclusion_analysis(records: &[EvalRecord]) -> InclusionAnalysis {
    let mut rows = Vec::new();
    for (key, group) in group_by_method(records) {
        rows.push(InclusionRow {
            mean_target_in_demos: mean_target_in_demos(&group).expect("non-empty group"),
            acc_at_1: acc_at_1(&group).expect("non-empty group"),
            tasks: by_task(&group).len(),
            strategy: key.label(),
            dataset: key.dataset,
            model: key.model,
            scope: key.scope,
            k: key.k,
        });
    }
    let mut by_k: BTreeMap<(String, String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_k.entry((r.dataset.clone(), r.model.clone(), r.k)).or_default();
        e.0.push(r.mean_target_in_demos);
        e.1.push(r.acc_at_1);
    }
    let correlations = by_k
        .into_iter()
        .map(|((dataset, model, k), (xs, ys))| InclusionCorrelation {
            dataset,
            model,
            k,
            strategies: xs.len(),
            pearson_r: pearson_correlation(&xs, &ys).ok(),
        })
        .collect();
    InclusionAnalysis { rows, correlations }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    /// `"0"`, `"1"`..`"cap"`, or `">cap"`.
    pub label: String,
    pub count: usize,
    pub acc_at_1: Option<f64>,
}

/// ACC@1 by number of current check-ins: one bucket per count 1..=cap plus an
/// overflow bucket. Tasks without any current check-in get a leading `"0"`
/// bucket, emitted only when such tasks exist.
pub fn context_length_breakdown(records: &[&EvalRecord], cap: usize) -> Vec<LengthBucket> {
    let cap = cap.max(1);
    let mut buckets: Vec<Vec<&EvalRecord>> = vec![Vec::new(); cap + 2];
    for r in records {
        buckets[r.context_len.min(cap + 1)].push(r);
    }
    buckets
        .iter()
        .enumerate()
        .filter(|(i, b)| *i > 0 || !b.is_empty())
        .map(|(i, b)| LengthBucket {
            label: if i <= cap { i.to_string() } else { format!(">{cap}") },
            count: b.len(),
            acc_at_1: acc_at_1(b).ok(),
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::test_support::record;
    use super::*;
    use crate::selection::StrategyKind;
    use proptest::prelude::*;

    fn refs(v: &[EvalRecord]) -> Vec<&EvalRecord> {
        v.iter().collect()
    }

    #[test]
    fn accuracy_basics() {
        let all: Vec<_> = (0..4).map(|t| record(StrategyKind::Lcs, false, 5, 0, t, true)).collect();
        assert_eq!(acc_at_1(&refs(&all)).unwrap(), 1.0);
        let three: Vec<_> = (0..4).map(|t| record(StrategyKind::Lcs, false, 5, 0, t, t != 2)).collect();
        assert_eq!(acc_at_1(&refs(&three)).unwrap(), 0.75);
        assert!(matches!(acc_at_1(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn random_trials_are_averaged() {
        let r = StrategyKind::Random { seed: 1 };
        let mut v: Vec<_> = (0..5).map(|t| record(r, false, 5, 0, t, t == 0)).collect();
        v.extend((0..5).map(|t| record(r, false, 5, 1, t, t < 2)));
        assert!((acc_at_1(&refs(&v)).unwrap() - 0.3).abs() < 1e-12);
        // Unequal trial sizes: the mean of trial means, not the pooled fraction.
        v.extend((5..10).map(|t| record(r, false, 5, 1, t, false)));
        assert!((acc_at_1(&refs(&v)).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn correctness_is_dense_id_equality() {
        let p = record(StrategyKind::Lcs, false, 5, 0, 3, true).prediction;
        assert!(EvalRecord::is_correct(&p, PoiId(3)));
        assert!(!EvalRecord::is_correct(&p, PoiId(4)));
        assert!(!EvalRecord::is_correct(&Prediction::failed("", None), PoiId(3)));
    }

    #[test]
    fn mcnemar_reference_values() {
        assert!((mcnemar_exact(10, 2) - 2.0 * 79.0 / 4096.0).abs() < 1e-12);
        assert!((mcnemar_chi_square(40, 20) - 0.0142).abs() < 5e-4);
        assert_eq!(mcnemar_exact(0, 0), 1.0);
        assert_eq!(mcnemar_exact(7, 7), 1.0);
        let paired = PairedOutcomes::from_bools(vec![true; 3], vec![true; 3]).unwrap();
        assert_eq!(mcnemar_test(&paired, McNemarMethod::Auto), McNemarResult { b: 0, c: 0, p_value: 1.0 });
    }

    #[test]
    fn mcnemar_auto_switches_at_25() {
        let mk = |b: usize, c: usize| {
            let mut a = vec![true; b];
            a.extend(vec![false; c]);
            let mut other = vec![false; b];
            other.extend(vec![true; c]);
            PairedOutcomes::from_bools(a, other).unwrap()
        };
        assert_eq!(mcnemar_test(&mk(20, 4), McNemarMethod::Auto).p_value, mcnemar_exact(20, 4));
        assert_eq!(mcnemar_test(&mk(20, 5), McNemarMethod::Auto).p_value, mcnemar_chi_square(20, 5));
    }

    proptest! {
        #[test]
        fn exact_and_chi_square_agree_near_switch(n in 25u64..=40, frac in 0.0f64..=1.0) {
            let b = (n as f64 * frac).round() as u64;
            let c = n - b;
            prop_assert!((mcnemar_exact(b, c) - mcnemar_chi_square(b, c)).abs() < 0.02);
        }

        #[test]
        fn mcnemar_is_symmetric_and_bounded(b in 0u64..60, c in 0u64..60) {
            for m in [McNemarMethod::Exact, McNemarMethod::ChiSquare] {
                let p = |b, c| match m { McNemarMethod::Exact => mcnemar_exact(b, c), _ => mcnemar_chi_square(b, c) };
                prop_assert!((0.0..=1.0).contains(&p(b, c)));
                prop_assert_eq!(p(b, c), p(c, b));
            }
        }
    }

    #[test]
    fn pearson_fixtures() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let twice: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_correlation(&xs, &twice).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_correlation(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson_correlation(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(pearson_correlation(&[1.0], &[1.0]), Err(EvalError::TooShort(1))));
        assert!(matches!(pearson_correlation(&[1.0, 2.0], &[1.0]), Err(EvalError::LengthMismatch(2, 1))));
    }

    #[test]
    fn pairing_aligns_by_task_id() {
        let a: Vec<_> = [3, 1, 2].iter().map(|&t| record(StrategyKind::Lcs, false, 5, 0, t, t == 1)).collect();
        let b: Vec<_> = [2, 3, 1].iter().map(|&t| record(StrategyKind::Random { seed: 0 }, false, 5, 0, t, t != 1)).collect();
        let p = PairedOutcomes::pair(&refs(&a), &refs(&b)).unwrap();
        assert_eq!(p.task_ids, vec![TrajectoryId(1), TrajectoryId(2), TrajectoryId(3)]);
        assert_eq!(p.a, vec![true, false, false]);
        assert_eq!(p.b, vec![false, true, true]);
        assert_eq!(p.discordant(), (1, 2));
        let short = &refs(&b)[..2];
        assert!(matches!(PairedOutcomes::pair(&refs(&a), short), Err(EvalError::Unpaired(_))));
    }

    #[test]
    fn inclusion_means_and_correlation() {
        let mut v = Vec::new();
        for (kind, hits, correct_every) in [
            (StrategyKind::Random { seed: 0 }, 0usize, 10u32),
            (StrategyKind::Jaccard, 3, 2),
            (StrategyKind::Lcs, 5, 1),
        ] {
            for t in 0..10 {
                let mut r = record(kind, false, 5, 0, t, t % correct_every == 0);
                r.target_poi_in_demos = hits;
                v.push(r);
            }
        }
        let a = inclusion_analysis(&v);
        let lcs = a.rows.iter().find(|r| r.strategy == "LCS").unwrap();
        assert_eq!(lcs.mean_target_in_demos, 5.0);
        assert_eq!(lcs.acc_at_1, 1.0);
        let random = a.rows.iter().find(|r| r.strategy == "Random").unwrap();
        assert_eq!(random.mean_target_in_demos, 0.0);
        assert_eq!(a.correlations.len(), 1);
        // Oracle: accuracies 0.1, 0.5, 1.0 against means 0, 3, 5.
        let expected = pearson_correlation(&[0.0, 3.0, 5.0], &[0.1, 0.5, 1.0]).unwrap();
        assert_eq!(a.correlations[0].pearson_r, Some(expected));

        let single = inclusion_analysis(&v[..10]);
        assert_eq!(single.correlations[0].pearson_r, None);
    }

    #[test]
    fn breakdown_buckets() {
        // context_len = 1 + task % 4 → tasks 0,4 in bucket 1; 1,5 in 2; 2 in 3; 3 in 4.
        let v: Vec<_> = (0..6).map(|t| record(StrategyKind::Lcs, false, 5, 0, t, t % 2 == 0)).collect();
        let b = context_length_breakdown(&refs(&v), 3);
        let labels: Vec<_> = b.iter().map(|x| x.label.as_str()).collect();
        assert_eq!(labels, ["1", "2", "3", ">3"]);
        assert_eq!(b.iter().map(|x| x.count).collect::<Vec<_>>(), [2, 2, 1, 1]);
        assert_eq!(b[0].acc_at_1, Some(1.0));
        assert_eq!(b[1].acc_at_1, Some(0.0));
        assert_eq!(b[2].acc_at_1, Some(1.0));
        assert_eq!(b[3].acc_at_1, Some(0.0));

        let wide = context_length_breakdown(&refs(&v[..1]), 5);
        assert_eq!(wide[0].acc_at_1, acc_at_1(&refs(&v[..1])).ok());
        assert_eq!(wide[1].count, 0);
        assert_eq!(wide[1].acc_at_1, None);

        let mut empty_ctx = v[0].clone();
        empty_ctx.context_len = 0;
        assert_eq!(context_length_breakdown(&[&empty_ctx], 2)[0].label, "0");
    }
}
