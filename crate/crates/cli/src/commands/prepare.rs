use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use poi_icl::dataset::{parse_checkins, write_archive, DatasetStats, PreparedDataset, SplitPolicy};
use poi_icl::synthetic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::lock::RunLock;

#[derive(Clone, Debug, Serialize)]
pub struct PrepareSummary {
    pub dataset: String,
    pub archive: PathBuf,
    pub archive_sha256: String,
    pub stats: DatasetStats,
    pub rejected_rows: usize,
    pub config_digest: String,
    pub template_version: String,
    pub seed: u64,
}

impl PrepareSummary {
    pub fn render(&self) -> String {
        let s = &self.stats;
        format!(
            "dataset   users  pois  test  avg_history\n{:<9} {:<6} {:<5} {:<5} {:.2}\n\narchive {} (sha256 {})\nrejected rows: {}\n",
            self.dataset,
            s.users,
            s.pois,
            s.test_instances,
            s.avg_history_per_user,
            self.archive.display(),
            self.archive_sha256,
            self.rejected_rows,
        )
    }
}

/// Ingests the raw check-ins (or generates a synthetic corpus), writes the
/// canonical archive and a stats report into the run directory.
pub fn cmd_prepare(config: &RunConfig) -> Result<PrepareSummary> {
    config.validate()?;
    let _lock = RunLock::acquire(&config.out)?;
    let ds = &config.dataset;
    let parsed = match (&ds.synthetic, &ds.path) {
        (Some(syn), _) => synthetic::generate(syn),
        (None, Some(path)) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            parse_checkins(BufReader::new(file), &ds.format)?
        }
        (None, None) => bail!("set `dataset.path` or `dataset.synthetic`"),
    };
    let rejected_rows = parsed.errors.len();
    if rejected_rows > 0 {
        let path = config.out.join("rejected_rows.jsonl");
        let mut out = BufWriter::new(File::create(&path)?);
        for e in &parsed.errors {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        log::warn!("{rejected_rows} malformed rows skipped; details in {}", path.display());
    }
    if parsed.checkins.is_empty() {
        match parsed.errors.first() {
            Some(e) => bail!(
                "no valid check-ins; the format descriptor does not match the file (line {}: {})",
                e.line,
                e.message
            ),
            None => bail!("input contains no check-ins"),
        }
    }

    let gap = chrono::Duration::seconds((ds.gap_hours * 3600.0).round() as i64);
    let policy = SplitPolicy {
        train_ratio: ds.train_ratio,
    };
    let prepared = PreparedDataset::prepare(ds.name.clone(), parsed, gap, policy, ds.render_offset_minutes)?;

    let archive = config.dataset_archive();
    if let Some(parent) = archive.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::new();
    write_archive(&prepared, &mut bytes)?;
    std::fs::write(&archive, &bytes).with_context(|| format!("writing {}", archive.display()))?;

    let summary = PrepareSummary {
        dataset: ds.name.clone(),
        archive,
        archive_sha256: format!("{:x}", Sha256::digest(&bytes)),
        stats: prepared.stats(),
        rejected_rows,
        config_digest: config.digest(),
        template_version: config.template_version(),
        seed: config.seed,
    };
    std::fs::write(config.out.join("stats.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
