use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use poi_icl::dataset::{read_archive, PredictionTask, PreparedDataset};
use poi_icl::evaluation::{append_record, load_records, write_header, EvalRecord, RecordKey, RecordsHeader};
use poi_icl::llm_gateway::{Gateway, PredictOutcome, TranscriptEntry};
use poi_icl::prompting::{build_prompt, PromptBundle, PromptTemplate, RenderOptions};
use poi_icl::selection::{RankedDemos, Selector, StrategyKind};
use poi_icl::similarity::Embedder;
use serde::Serialize;

use crate::config::{Cell, RunConfig};
use crate::lock::RunLock;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write prompts instead of calling the backend.
    pub dry_run: bool,
    /// Stop after this many new records (the run can be resumed later).
    pub max_new_records: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub records_written: usize,
    pub already_complete: usize,
    pub prompts_written: usize,
    pub backend_calls: u64,
    pub records_path: PathBuf,
}

pub fn load_dataset(config: &RunConfig) -> Result<PreparedDataset> {
    let path = config.dataset_archive();
    let file = File::open(&path).with_context(|| format!("opening {} (run `prepare` first)", path.display()))?;
    Ok(read_archive(BufReader::new(file))?)
}

/// Test tasks in id order, limited by `dataset.max_tasks`.
pub fn tasks(config: &RunConfig, dataset: &PreparedDataset) -> Vec<PredictionTask> {
    let mut tasks = dataset.split.test_tasks.clone();
    tasks.sort_by_key(|t| t.trajectory_id);
    if let Some(n) = config.dataset.max_tasks {
        tasks.truncate(n);
    }
    tasks
}

/// Reads the keys already recorded, dropping a partially written last line.
fn completed_keys(path: &Path, header: &RecordsHeader) -> Result<HashSet<RecordKey>> {
    let text = std::fs::read_to_string(path)?;
    if !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        log::warn!("dropping an incomplete final line from {}", path.display());
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(keep as u64)?;
    }
    let archive = load_records(path)?;
    if archive.header.config_digest != header.config_digest {
        bail!(
            "{} holds records for configuration {} but the current configuration is {}; use a fresh --out",
            path.display(),
            archive.header.config_digest,
            header.config_digest
        );
    }
    Ok(archive.records.iter().map(EvalRecord::key).collect())
}

fn key_of(cell: &Cell, task: &PredictionTask) -> RecordKey {
    RecordKey {
        user_filter: cell.spec.user_filter,
        strategy: cell.spec.kind.name().to_owned(),
        k: cell.spec.k,
        trial: cell.trial,
        task_id: task.trajectory_id,
    }
}

struct Selected<'t> {
    task: &'t PredictionTask,
    ranked: RankedDemos,
    bundle: PromptBundle,
    selection_us: f64,
}

/// Calls the backend with at most `workers` requests in flight. Results come
/// back in input order.
fn predict_all(gateway: &Gateway, items: &[Selected<'_>], workers: usize) -> Vec<PredictOutcome> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<PredictOutcome>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let outcome = gateway.predict(&item.bundle);
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[derive(Serialize)]
struct PromptLine<'a> {
    method: String,
    k: usize,
    trial: u32,
    task_id: u32,
    demos: usize,
    prompt: &'a str,
}

/// Executes the grid: strategy-major, then k, then trial, then task. Each
/// cell is selected in one single-threaded timed pass, then its prompts go to
/// the backend in parallel. Records are appended as cells finish, so an
/// interrupted run resumes where it stopped.
pub fn cmd_run(config: &RunConfig, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let gateway = if options.dry_run {
        None
    } else {
        Some(Gateway::new(config.backend.clone())?)
    };
    let _lock = RunLock::acquire(&config.out)?;
    let dataset = load_dataset(config)?;
    let tasks = tasks(config, &dataset);
    let cells = config.cells()?;
    let template = PromptTemplate::by_id(&config.template)?;
    let render = RenderOptions {
        offset_minutes: dataset.render_offset_minutes,
        order: config.demo_order,
    };
    let pool = dataset.all_pool();
    let embedder = cells
        .iter()
        .any(|c| c.spec.kind == StrategyKind::EmbSim)
        .then(|| config.embedding.provider())
        .transpose()?
        .map(|p| Embedder::new(p, dataset.render_offset_minutes));
    let mut selector = Selector::new(&pool);
    if let Some(e) = &embedder {
        selector = selector.with_embedder(e);
    }

    let model = config.backend.model_label();
    let header = RecordsHeader::new(
        dataset.name.clone(),
        model.clone(),
        config.digest(),
        template.version_id(),
        config.seed,
    );
    let records_path = config.out.join("records.jsonl");
    let mut summary = RunSummary {
        records_path: records_path.clone(),
        ..Default::default()
    };

    let done = if options.dry_run || !records_path.exists() {
        HashSet::new()
    } else {
        completed_keys(&records_path, &header)?
    };
    let mut records_out = None;
    let mut transcript = None;
    let mut prompts_out = None;
    if options.dry_run {
        prompts_out = Some(BufWriter::new(File::create(config.out.join("prompts.jsonl"))?));
    } else {
        let fresh = !records_path.exists();
        let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(&records_path)?);
        if fresh {
            write_header(&header, &mut f)?;
        }
        records_out = Some(f);
        transcript = Some(BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(config.out.join("transcript.jsonl"))?,
        ));
    }

    let mut budget = options.max_new_records.unwrap_or(usize::MAX);
    for cell in &cells {
        if budget == 0 {
            break;
        }
        let remaining: Vec<&PredictionTask> = tasks.iter().filter(|t| !done.contains(&key_of(cell, t))).collect();
        summary.already_complete += tasks.len() - remaining.len();
        let pending: Vec<&PredictionTask> = remaining.into_iter().take(budget).collect();
        if pending.is_empty() {
            continue;
        }

        let mut selected = Vec::with_capacity(pending.len());
        for task in pending {
            let start = Instant::now();
            let ranked = selector.select(task, &cell.spec)?;
            let selection_us = start.elapsed().as_secs_f64() * 1e6;
            let bundle = build_prompt(task, &ranked, &pool, &template, &render)?;
            selected.push(Selected {
                task,
                ranked,
                bundle,
                selection_us,
            });
        }

        if let Some(out) = prompts_out.as_mut() {
            for s in &selected {
                serde_json::to_writer(
                    &mut *out,
                    &PromptLine {
                        method: cell.spec.label(),
                        k: cell.spec.k,
                        trial: cell.trial,
                        task_id: s.task.trajectory_id.0,
                        demos: s.bundle.demo_count,
                        prompt: &s.bundle.full_text,
                    },
                )?;
                out.write_all(b"\n")?;
            }
            summary.prompts_written += selected.len();
            budget -= selected.len();
            continue;
        }

        let gateway = gateway.as_ref().expect("not a dry run");
        let outcomes = predict_all(gateway, &selected, config.backend.max_in_flight);
        let (records, log) = (records_out.as_mut().expect("open"), transcript.as_mut().expect("open"));
        for (s, outcome) in selected.iter().zip(outcomes) {
            for a in &outcome.attempts {
                let entry = TranscriptEntry {
                    task_id: s.task.trajectory_id.0,
                    cell: format!("{} k={} trial={}", cell.spec.label(), cell.spec.k, cell.trial),
                    attempt: a.attempt,
                    latency_ms: a.latency_ms,
                    status: a.status.clone(),
                };
                serde_json::to_writer(&mut *log, &entry)?;
                log.write_all(b"\n")?;
            }
            let llm_latency_ms = outcome.total_latency_ms();
            let prediction = outcome.prediction;
            let record = EvalRecord {
                dataset: dataset.name.clone(),
                model: model.clone(),
                task_id: s.task.trajectory_id,
                user: s.task.user,
                strategy: cell.spec,
                trial: cell.trial,
                demos: s.ranked.demos.clone(),
                fallback: s.ranked.fallback,
                target_poi: s.task.target_poi,
                target_poi_in_demos: s.bundle.target_poi_in_demos,
                correct: EvalRecord::is_correct(&prediction, s.task.target_poi),
                prediction,
                selection_time_us: s.selection_us,
                llm_latency_ms,
                template_version: s.bundle.template_version.clone(),
                context_len: s.task.context_len(),
            };
            append_record(&record, &mut *records)?;
        }
        records.flush()?;
        log.flush()?;
        summary.records_written += selected.len();
        budget -= selected.len();
    }
    if let Some(mut out) = prompts_out {
        out.flush()?;
    }
    summary.backend_calls = gateway.as_ref().map_or(0, Gateway::calls);
    Ok(summary)
}
