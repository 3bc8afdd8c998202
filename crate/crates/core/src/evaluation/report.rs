//! Result tables and plot series built from record archives.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    acc_at_1, context_length_breakdown, failed_parses, inclusion_analysis, mcnemar_test, mean_selection_us,
    mean_target_in_demos, EvalRecord, InclusionAnalysis, LengthBucket, McNemarMethod, MethodKey, PairedOutcomes,
    RecordArchive, RecordsHeader, Result,
};

/// Column order of the result table.
const STRATEGY_ORDER: &[&str] = &["Random", "EmbSim", "DTW", "Jaccard", "LCS", "Time"];

fn strategy_rank(name: &str) -> usize {
    STRATEGY_ORDER.iter().position(|s| *s == name).unwrap_or(STRATEGY_ORDER.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    #[default]
    None,
    /// p < 0.1 against Random.
    Dagger,
    /// p < 0.05 against Random.
    DoubleDagger,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 0.05 {
            Significance::DoubleDagger
        } else if p < 0.1 {
            Significance::Dagger
        } else {
            Significance::None
        }
    }

    pub fn marker(&self) -> &'static str {
        match self {
            Significance::None => "",
            Significance::Dagger => "†",
            Significance::DoubleDagger => "‡",
        }
    }
}

/// Provenance of the records behind one cell.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_digest: String,
    pub template_version: String,
    pub seed: String,
}

impl ReportMeta {
    fn from_headers<'a>(headers: impl IntoIterator<Item = &'a RecordsHeader>) -> Self {
        let (mut d, mut t, mut s) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for h in headers {
            d.insert(h.config_digest.clone());
            t.insert(h.template_version.clone());
            s.insert(h.seed.to_string());
        }
        let join = |set: BTreeSet<String>| set.into_iter().collect::<Vec<_>>().join("+");
        Self {
            config_digest: join(d),
            template_version: join(t),
            seed: join(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub dataset: String,
    pub model: String,
    pub scope: String,
    pub strategy: String,
    pub k: usize,
    pub acc_at_1: f64,
    pub tasks: usize,
    pub trials: usize,
    pub failed_parses: usize,
    pub mean_selection_us: f64,
    pub mean_target_in_demos: f64,
    /// McNemar p against Random in the same block; `None` for Random itself
    /// or when no aligned Random records exist.
    pub p_value: Option<f64>,
    pub significance: Significance,
    /// Highest ACC@1 within its (dataset, model, scope, k) block.
    pub best: bool,
    #[serde(flatten)]
    pub meta: ReportMeta,
}

impl ReportCell {
    fn method(&self) -> MethodKey {
        MethodKey {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            scope: self.scope.clone(),
            strategy: self.strategy.clone(),
            k: self.k,
        }
    }

    pub fn label(&self) -> String {
        self.method().label()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub cells: Vec<ReportCell>,
    pub inclusion: InclusionAnalysis,
    pub breakdown: Vec<(MethodKey, Vec<LengthBucket>)>,
    pub meta: ReportMeta,
    pub warnings: Vec<String>,
}

/// Merges archives and computes every table and series. Duplicate records
/// (same method, trial and task) keep their first occurrence.
pub fn build_report(archives: &[RecordArchive], breakdown_cap: usize, mcnemar: McNemarMethod) -> Result<Report> {
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut origin: BTreeMap<MethodKey, BTreeSet<usize>> = BTreeMap::new();
    for (ai, archive) in archives.iter().enumerate() {
        for r in &archive.records {
            if !seen.insert((r.dataset.clone(), r.model.clone(), r.key())) {
                warnings.push(format!(
                    "duplicate record for {} task {} trial {} ignored",
                    r.strategy, r.task_id, r.trial
                ));
                continue;
            }
            origin.entry(r.method()).or_default().insert(ai);
            records.push(r.clone());
        }
    }
    if records.is_empty() {
        return Err(super::EvalError::Empty);
    }

    let groups = super::group_by_method(&records);
    let mut cells = Vec::new();
    for (key, group) in &groups {
        let headers = origin[key].iter().map(|&i| &archives[i].header);
        let trials: BTreeSet<u32> = group.iter().map(|r| r.trial).collect();
        let tasks: BTreeSet<_> = group.iter().map(|r| r.task_id).collect();
        let mut cell = ReportCell {
            dataset: key.dataset.clone(),
            model: key.model.clone(),
            scope: key.scope.clone(),
            strategy: key.strategy.clone(),
            k: key.k,
            acc_at_1: acc_at_1(group)?,
            tasks: tasks.len(),
            trials: trials.len(),
            failed_parses: failed_parses(group),
            mean_selection_us: mean_selection_us(group)?,
            mean_target_in_demos: mean_target_in_demos(group)?,
            p_value: None,
            significance: Significance::None,
            best: false,
            meta: ReportMeta::from_headers(headers),
        };
        if key.strategy != "Random" {
            let random_key = MethodKey {
                strategy: "Random".into(),
                ..key.clone()
            };
            if let Some(random) = groups.get(&random_key) {
                match PairedOutcomes::pair(group, random) {
                    Ok(paired) => {
                        let p = mcnemar_test(&paired, mcnemar).p_value;
                        cell.p_value = Some(p);
                        cell.significance = Significance::from_p(p);
                    }
                    Err(e) => warnings.push(format!("{}: marker omitted, {e}", cell.label())),
                }
            }
        }
        cells.push(cell);
    }

    let mut best: BTreeMap<(String, String, String, usize), f64> = BTreeMap::new();
    for c in &cells {
        let e = best
            .entry((c.dataset.clone(), c.model.clone(), c.scope.clone(), c.k))
            .or_insert(f64::NEG_INFINITY);
        *e = e.max(c.acc_at_1);
    }
    for c in &mut cells {
        c.best = c.acc_at_1 == best[&(c.dataset.clone(), c.model.clone(), c.scope.clone(), c.k)];
    }
    cells.sort_by(|a, b| {
        (&a.dataset, &a.model, a.scope != "All", a.k, strategy_rank(&a.strategy))
            .cmp(&(&b.dataset, &b.model, b.scope != "All", b.k, strategy_rank(&b.strategy)))
    });

    let breakdown = groups
        .iter()
        .map(|(key, group)| (key.clone(), context_length_breakdown(group, breakdown_cap)))
        .collect();
    Ok(Report {
        cells,
        inclusion: inclusion_analysis(&records),
        breakdown,
        meta: ReportMeta::from_headers(archives.iter().map(|a| &a.header)),
        warnings,
    })
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing CSV to memory");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV output is UTF-8")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    /// ACC@1 matrix: one row per (dataset, model, scope, k), one column per
    /// strategy. `**x**` marks the best cell of a row; †/‡ mark p < 0.1/0.05
    /// against Random.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# config_digest={} template={} seed={}",
            self.meta.config_digest, self.meta.template_version, self.meta.seed
        );
        let mut columns: Vec<&str> = self.cells.iter().map(|c| c.strategy.as_str()).collect();
        columns.sort_by_key(|s| strategy_rank(s));
        columns.dedup();

        let mut rows: Vec<(Vec<String>, BTreeMap<&str, String>)> = Vec::new();
        for c in &self.cells {
            let lead = vec![c.dataset.clone(), c.model.clone(), c.scope.clone(), c.k.to_string()];
            if rows.last().is_none_or(|(l, _)| *l != lead) {
                rows.push((lead, BTreeMap::new()));
            }
            let value = format!("{:.4}", c.acc_at_1);
            let value = if c.best { format!("**{value}**") } else { value };
            rows.last_mut()
                .expect("pushed above")
                .1
                .insert(c.strategy.as_str(), format!("{value}{}", c.significance.marker()));
        }

        let mut header: Vec<String> = ["dataset", "model", "scope", "k"].map(String::from).to_vec();
        header.extend(columns.iter().map(|s| s.to_string()));
        let table: Vec<Vec<String>> = std::iter::once(header)
            .chain(rows.into_iter().map(|(lead, vals)| {
                lead.into_iter()
                    .chain(columns.iter().map(|s| vals.get(s).cloned().unwrap_or_else(|| "-".into())))
                    .collect()
            }))
            .collect();
        let widths: Vec<usize> = (0..table[0].len())
            .map(|i| table.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn table_csv(&self) -> String {
        csv_string(|w| {
            w.write_record([
                "dataset", "model", "scope", "strategy", "k", "acc_at_1", "tasks", "trials", "failed_parses",
                "p_value_vs_random", "marker", "best", "config_digest", "template_version", "seed",
            ])?;
            for c in &self.cells {
                w.write_record([
                    c.dataset.clone(),
                    c.model.clone(),
                    c.scope.clone(),
                    c.label(),
                    c.k.to_string(),
                    c.acc_at_1.to_string(),
                    c.tasks.to_string(),
                    c.trials.to_string(),
                    c.failed_parses.to_string(),
                    opt(c.p_value),
                    c.significance.marker().to_owned(),
                    c.best.to_string(),
                    c.meta.config_digest.clone(),
                    c.meta.template_version.clone(),
                    c.meta.seed.clone(),
                ])?;
            }
            Ok(())
        })
    }

    /// Selection time against accuracy, one point per method.
    pub fn cost_accuracy_csv(&self) -> String {
        csv_string(|w| {
            w.write_record([
                "dataset", "model", "strategy", "k", "mean_selection_us", "acc_at_1", "config_digest",
                "template_version", "seed",
            ])?;
            for c in &self.cells {
                w.write_record([
                    c.dataset.clone(),
                    c.model.clone(),
                    c.label(),
                    c.k.to_string(),
                    c.mean_selection_us.to_string(),
                    c.acc_at_1.to_string(),
                    c.meta.config_digest.clone(),
                    c.meta.template_version.clone(),
                    c.meta.seed.clone(),
                ])?;
            }
            Ok(())
        })
    }

    /// ACC@1 per number of current check-ins.
    pub fn context_length_csv(&self) -> String {
        let meta: BTreeMap<MethodKey, &ReportMeta> = self.cells.iter().map(|c| (c.method(), &c.meta)).collect();
        csv_string(|w| {
            w.write_record([
                "dataset", "model", "strategy", "k", "bucket", "count", "acc_at_1", "config_digest",
                "template_version", "seed",
            ])?;
            for (key, buckets) in &self.breakdown {
                let m = meta.get(key).copied().cloned().unwrap_or_default();
                for b in buckets {
                    w.write_record([
                        key.dataset.clone(),
                        key.model.clone(),
                        key.label(),
                        key.k.to_string(),
                        b.label.clone(),
                        b.count.to_string(),
                        opt(b.acc_at_1),
                        m.config_digest.clone(),
                        m.template_version.clone(),
                        m.seed.clone(),
                    ])?;
                }
            }
            Ok(())
        })
    }

    /// Mean demonstrations ending at the target POI, with ACC@1.
    pub fn inclusion_csv(&self) -> String {
        csv_string(|w| {
            w.write_record([
                "dataset", "model", "strategy", "k", "mean_target_in_demos", "acc_at_1", "config_digest",
                "template_version", "seed",
            ])?;
            for c in &self.cells {
                w.write_record([
                    c.dataset.clone(),
                    c.model.clone(),
                    c.label(),
                    c.k.to_string(),
                    c.mean_target_in_demos.to_string(),
                    c.acc_at_1.to_string(),
                    c.meta.config_digest.clone(),
                    c.meta.template_version.clone(),
                    c.meta.seed.clone(),
                ])?;
            }
            Ok(())
        })
    }

    /// Correlation between inclusion counts and ACC@1 across methods, per k.
    pub fn correlation_csv(&self) -> String {
        csv_string(|w| {
            w.write_record([
                "dataset", "model", "k", "strategies", "pearson_r", "config_digest", "template_version", "seed",
            ])?;
            for c in &self.inclusion.correlations {
                w.write_record([
                    c.dataset.clone(),
                    c.model.clone(),
                    c.k.to_string(),
                    c.strategies.to_string(),
                    opt(c.pearson_r),
                    self.meta.config_digest.clone(),
                    self.meta.template_version.clone(),
                    self.meta.seed.clone(),
                ])?;
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::record;
    use super::*;
    use crate::selection::StrategyKind;

    fn archive(records: Vec<EvalRecord>) -> RecordArchive {
        RecordArchive {
            header: RecordsHeader::new("syn", "mock", "d1g35t", "fewshot@1", 42),
            records,
        }
    }

    /// 30 tasks: LCS right on all, Random right on every 5th, Jaccard equal to Random.
    fn fixture() -> Vec<EvalRecord> {
        let mut v = Vec::new();
        for t in 0..30 {
            v.push(record(StrategyKind::Random { seed: 0 }, false, 5, 0, t, t % 5 == 0));
            v.push(record(StrategyKind::Lcs, false, 5, 0, t, true));
            v.push(record(StrategyKind::Jaccard, false, 5, 0, t, t % 5 == 0));
        }
        v
    }

    #[test]
    fn markers_and_best() {
        let report = build_report(&[archive(fixture())], 4, McNemarMethod::Auto).unwrap();
        let cell = |s: &str| report.cells.iter().find(|c| c.strategy == s).unwrap();
        assert!(cell("LCS").best);
        assert!(!cell("Random").best);
        assert_eq!(cell("LCS").significance, Significance::DoubleDagger);
        assert_eq!(cell("Jaccard").significance, Significance::None);
        assert_eq!(cell("Jaccard").p_value, Some(1.0));
        assert_eq!(cell("Random").p_value, None);
        let order: Vec<_> = report.cells.iter().map(|c| c.strategy.as_str()).collect();
        assert_eq!(order, ["Random", "Jaccard", "LCS"]);

        let text = report.render_text();
        assert!(text.contains("**1.0000**‡"), "{text}");
        assert!(text.contains("d1g35t"));
        assert!(report.table_csv().lines().nth(1).unwrap().ends_with("d1g35t,fewshot@1,42"));
    }

    #[test]
    fn single_method_has_no_markers() {
        let only: Vec<_> = (0..10).map(|t| record(StrategyKind::Lcs, false, 5, 0, t, t < 4)).collect();
        let report = build_report(&[archive(only)], 4, McNemarMethod::Auto).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0].significance, Significance::None);
        assert!(report.cells[0].best);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn two_archives_pair_and_unpaired_warns() {
        let (random, lcs): (Vec<_>, Vec<_>) = fixture()
            .into_iter()
            .filter(|r| r.strategy.kind != StrategyKind::Jaccard)
            .partition(|r| r.strategy.kind.is_random());
        let merged = build_report(&[archive(random.clone()), archive(lcs.clone())], 4, McNemarMethod::Auto).unwrap();
        let single = build_report(&[archive(random.iter().chain(&lcs).cloned().collect())], 4, McNemarMethod::Auto).unwrap();
        assert_eq!(merged.cells, single.cells);

        let partial = build_report(&[archive(random[..10].to_vec()), archive(lcs)], 4, McNemarMethod::Auto).unwrap();
        let cell = partial.cells.iter().find(|c| c.strategy == "LCS").unwrap();
        assert_eq!(cell.significance, Significance::None);
        assert_eq!(partial.warnings.len(), 1);
    }

    #[test]
    fn plot_series_shapes() {
        let report = build_report(&[archive(fixture())], 3, McNemarMethod::Auto).unwrap();
        assert_eq!(report.cost_accuracy_csv().lines().count(), 1 + 3);
        // Three methods × buckets 1, 2, 3, >3.
        assert_eq!(report.context_length_csv().lines().count(), 1 + 3 * 4);
        assert_eq!(report.inclusion_csv().lines().count(), 1 + 3);
        assert_eq!(report.correlation_csv().lines().count(), 1 + 1);
    }

    #[test]
    fn duplicates_are_dropped() {
        let recs = fixture();
        let report = build_report(&[archive(recs.clone()), archive(recs)], 3, McNemarMethod::Auto).unwrap();
        assert_eq!(report.warnings.len(), 90);
        assert_eq!(report.cells.iter().map(|c| c.tasks).sum::<usize>(), 90);
    }
}
