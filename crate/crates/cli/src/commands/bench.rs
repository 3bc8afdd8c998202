use anyhow::Result;
use poi_icl::dataset::{DemonstrationPool, PredictionTask};
use poi_icl::evaluation::{bench_selection, BenchOptions, BenchReport};
use poi_icl::selection::{Selector, StrategyKind, StrategySpec};
use poi_icl::similarity::Embedder;
use poi_icl::synthetic::bench_corpus;

use super::run::{load_dataset, tasks};
use crate::config::{parse_method, RunConfig};

/// Every (method, k) of the grid; random gets the run seed.
fn bench_specs(config: &RunConfig) -> Result<Vec<StrategySpec>> {
    let mut specs = Vec::new();
    for method in &config.grid.methods {
        for &k in &config.grid.k {
            let mut spec = parse_method(method, k)?;
            if spec.kind.is_random() {
                spec.kind = StrategyKind::Random { seed: config.seed };
            }
            specs.push(spec);
        }
    }
    Ok(specs)
}

pub fn bench_csv(report: &BenchReport, config: &RunConfig) -> String {
    let mut out = String::from("strategy,k,mean_us,p50_us,p95_us,samples,pool_size,config_digest,template_version,seed\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.k,
            r.mean_us,
            r.p50_us,
            r.p95_us,
            r.samples,
            report.pool_size,
            config.digest(),
            config.template_version(),
            config.seed
        ));
    }
    out
}

/// Times demonstration selection alone, single-threaded, on the prepared
/// dataset or on a generated pool. Writes `bench.json` and `bench.csv`.
pub fn cmd_bench(config: &RunConfig) -> Result<BenchReport> {
    config.validate()?;
    let specs = bench_specs(config)?;
    let (pool, tasks, offset): (DemonstrationPool, Vec<PredictionTask>, i32) = match &config.bench.synthetic_pool {
        Some(p) => {
            let corpus = bench_corpus(p.size, p.mean_len, config.bench.max_tasks, p.users, config.seed);
            (corpus.pool, corpus.tasks, 0)
        }
        None => {
            let dataset = load_dataset(config)?;
            let mut tasks = tasks(config, &dataset);
            tasks.truncate(config.bench.max_tasks);
            (dataset.all_pool(), tasks, dataset.render_offset_minutes)
        }
    };
    let embedder = Embedder::new(config.embedding.provider()?, offset);
    let selector = Selector::new(&pool).with_embedder(&embedder);
    let options = BenchOptions {
        repetitions: config.bench.repetitions,
        warmup: config.bench.warmup,
    };
    let report = bench_selection(&selector, &specs, &tasks, options)?;
    std::fs::create_dir_all(&config.out)?;
    std::fs::write(config.out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(config.out.join("bench.csv"), bench_csv(&report, config))?;
    Ok(report)
}
