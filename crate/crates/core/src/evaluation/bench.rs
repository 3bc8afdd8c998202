//! Single-threaded selection-cost benchmark.
//!
//! Each repetition is a cold pass over all tasks: the embedding cache is
//! cleared first, so the pool-encoding cost is paid once per pass and shared
//! by its tasks through the cache. Simulated provider cost is added to the
//! wall time of the call that incurred it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Result;
use crate::dataset::PredictionTask;
use crate::selection::{Selector, StrategyKind, StrategySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub repetitions: usize,
    /// Passes run first and discarded.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 3,
            warmup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub k: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    /// Timed samples (tasks × repetitions).
    pub samples: usize,
    /// Selections performed per task, warm-up included.
    pub touches_per_task: usize,
    pub mean_demos: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub pool_size: usize,
    pub tasks: usize,
}

impl BenchReport {
    pub fn row(&self, label: &str, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == label && r.k == k)
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `selector.select` for every spec and task. Specs are interleaved
/// within each pass so slow drift in machine load affects all of them alike.
/// Embedding-based specs run one after another, each over a cold cache.
pub fn bench_selection(
    selector: &Selector<'_>,
    specs: &[StrategySpec],
    tasks: &[PredictionTask],
    options: BenchOptions,
) -> Result<BenchReport> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(tasks.len() * options.repetitions); specs.len()];
    let mut demos: Vec<usize> = vec![0; specs.len()];
    let mut touches: Vec<Vec<usize>> = vec![vec![0; tasks.len()]; specs.len()];
    let mut time = |si: usize, ti: usize, timed: bool| -> Result<()> {
        let spec = &specs[si];
        let embedder = selector.embedder().filter(|_| spec.kind == StrategyKind::EmbSim);
        let simulated_before = embedder.map(|e| e.cache().simulated_cost());
        let start = Instant::now();
        let ranked = selector.select(&tasks[ti], spec)?;
        let mut elapsed = start.elapsed();
        if let (Some(e), Some(before)) = (embedder, simulated_before) {
            elapsed += e.cache().simulated_cost() - before;
        }
        touches[si][ti] += 1;
        if timed {
            samples[si].push(elapsed.as_secs_f64() * 1e6);
            demos[si] += ranked.len();
        }
        Ok(())
    };
    let (embedded, plain): (Vec<usize>, Vec<usize>) =
        (0..specs.len()).partition(|&si| specs[si].kind == StrategyKind::EmbSim && selector.embedder().is_some());
    for pass in 0..options.warmup + options.repetitions {
        let timed = pass >= options.warmup;
        // Reversing the order on odd passes cancels position effects.
        let order = |v: &[usize]| -> Vec<usize> {
            if pass % 2 == 1 {
                v.iter().rev().copied().collect()
            } else {
                v.to_vec()
            }
        };
        // Cache-free specs run task by task, so every spec sees the same
        // conditions for a given task.
        let plain = order(&plain);
        for ti in 0..tasks.len() {
            for &si in &plain {
                time(si, ti, timed)?;
            }
        }
        // Embedding specs each start from a cold cache.
        for si in order(&embedded) {
            if let Some(e) = selector.embedder() {
                e.cache().clear();
            }
            for ti in 0..tasks.len() {
                time(si, ti, timed)?;
            }
        }
    }
    let rows = specs
        .iter()
        .zip(samples)
        .zip(demos)
        .zip(touches)
        .map(|(((spec, mut s), d), t)| {
            s.sort_by(f64::total_cmp);
            let n = s.len();
            BenchRow {
                strategy: spec.label(),
                k: spec.k,
                mean_us: if n == 0 { 0.0 } else { s.iter().sum::<f64>() / n as f64 },
                p50_us: percentile(&s, 0.5),
                p95_us: percentile(&s, 0.95),
                samples: n,
                touches_per_task: t.iter().copied().max().unwrap_or(0),
                mean_demos: if n == 0 { 0.0 } else { d as f64 / n as f64 },
            }
        })
        .collect();
    Ok(BenchReport {
        rows,
        pool_size: selector.pool().len(),
        tasks: tasks.len(),
    })
}
