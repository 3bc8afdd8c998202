use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use poi_icl::evaluation::{build_report, load_records, McNemarMethod, Report};

/// Builds tables and plot series from record archives alone and writes them
/// into `out_dir`.
pub fn cmd_report(archives: &[PathBuf], out_dir: &Path, breakdown_cap: usize) -> Result<Report> {
    if archives.is_empty() {
        bail!("report needs at least one records archive");
    }
    let loaded = archives
        .iter()
        .map(|p| load_records(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&loaded, breakdown_cap, McNemarMethod::Auto)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("table.txt"), report.render_text())?;
    std::fs::write(out_dir.join("table.csv"), report.table_csv())?;
    std::fs::write(out_dir.join("cost_vs_accuracy.csv"), report.cost_accuracy_csv())?;
    std::fs::write(out_dir.join("context_length.csv"), report.context_length_csv())?;
    std::fs::write(out_dir.join("inclusion.csv"), report.inclusion_csv())?;
    std::fs::write(out_dir.join("inclusion_correlation.csv"), report.correlation_csv())?;
    Ok(report)
}
