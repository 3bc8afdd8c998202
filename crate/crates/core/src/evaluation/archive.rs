//! Evaluation record archive: one JSON header line, then one record per line.
//! Records are appended as they complete, so a run can be resumed.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord, Result};

pub const RECORDS_SCHEMA: &str = "poi-icl.records";
pub const RECORDS_SCHEMA_VERSION: u32 = 1;

/// Provenance shared by every record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordsHeader {
    pub schema: String,
    pub version: u32,
    pub dataset: String,
    pub model: String,
    pub config_digest: String,
    pub template_version: String,
    pub seed: u64,
}

impl RecordsHeader {
    pub fn new(
        dataset: impl Into<String>,
        model: impl Into<String>,
        config_digest: impl Into<String>,
        template_version: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            schema: RECORDS_SCHEMA.to_owned(),
            version: RECORDS_SCHEMA_VERSION,
            dataset: dataset.into(),
            model: model.into(),
            config_digest: config_digest.into(),
            template_version: template_version.into(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordArchive {
    pub header: RecordsHeader,
    pub records: Vec<EvalRecord>,
}

pub fn write_header<W: Write>(header: &RecordsHeader, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn append_record<W: Write>(record: &EvalRecord, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_records<W: Write>(header: &RecordsHeader, records: &[EvalRecord], mut out: W) -> Result<()> {
    write_header(header, &mut out)?;
    for r in records {
        append_record(r, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<RecordArchive> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(EvalError::Archive {
        line: 1,
        message: "empty archive".into(),
    })?;
    let header: RecordsHeader = serde_json::from_str(&first?).map_err(|e| EvalError::Archive {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != RECORDS_SCHEMA || header.version != RECORDS_SCHEMA_VERSION {
        return Err(EvalError::SchemaMismatch {
            expected: RECORDS_SCHEMA.into(),
            expected_version: RECORDS_SCHEMA_VERSION,
            found: header.schema,
            found_version: header.version,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| EvalError::Archive {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(RecordArchive { header, records })
}

pub fn load_records(path: &Path) -> Result<RecordArchive> {
    read_records(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::record;
    use super::*;
    use crate::selection::StrategyKind;

    fn header() -> RecordsHeader {
        RecordsHeader::new("syn", "mock", "abc123", "fewshot@1", 42)
    }

    #[test]
    fn round_trip_thousand_records() {
        let mut records = Vec::new();
        for t in 0..1_000u32 {
            let mut r = record(StrategyKind::Dtw, t % 2 == 0, 5, 0, t, t % 3 == 0);
            r.selection_time_us = f64::from(t) / 7.0 + 0.1;
            r.llm_latency_ms = (f64::from(t) * 1.37).sqrt();
            records.push(r);
        }
        let mut buf = Vec::new();
        write_records(&header(), &records, &mut buf).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back.header, header());
        assert_eq!(back.records, records);
        let mut again = Vec::new();
        write_records(&back.header, &back.records, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn schema_version_mismatch_names_both() {
        let mut h = header();
        h.version = 9;
        let mut buf = Vec::new();
        write_records(&h, &[], &mut buf).unwrap();
        let err = read_records(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("v1") && err.contains("v9"), "{err}");
    }

    #[test]
    fn truncated_final_line_reports_line_number() {
        let records: Vec<_> = (0..3).map(|t| record(StrategyKind::Lcs, false, 5, 0, t, true)).collect();
        let mut buf = Vec::new();
        write_records(&header(), &records, &mut buf).unwrap();
        buf.truncate(buf.len() - 20);
        match read_records(buf.as_slice()) {
            Err(EvalError::Archive { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected archive error, got {other:?}"),
        }
    }
}
