use std::io::Read;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::{CheckIn, GeoPoint, PoiId, Result, UserId, Vocabulary};

/// Zero-based column positions of each check-in field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub user: usize,
    pub poi: usize,
    pub category: usize,
    pub timestamp: usize,
    pub latitude: usize,
    pub longitude: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            user: 0,
            poi: 1,
            category: 2,
            timestamp: 3,
            latitude: 4,
            longitude: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "pattern")]
pub enum TimestampFormat {
    /// RFC 3339 / ISO-8601. Values without an offset are read as UTC.
    #[default]
    Iso8601,
    EpochSeconds,
    /// A chrono `strftime` pattern; must include an offset (`%z`) unless the
    /// values are UTC wall-clock times.
    Pattern(String),
}

impl TimestampFormat {
    pub fn parse(&self, raw: &str) -> std::result::Result<DateTime<Utc>, String> {
        let raw = raw.trim();
        match self {
            TimestampFormat::Iso8601 => DateTime::parse_from_rfc3339(raw)
                .map(|t| t.with_timezone(&Utc))
                .or_else(|_| {
                    NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
                        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
                        .map(|n| Utc.from_utc_datetime(&n))
                })
                .map_err(|e| format!("bad ISO-8601 timestamp {raw:?}: {e}")),
            TimestampFormat::EpochSeconds => raw
                .parse::<i64>()
                .ok()
                .and_then(|s| Utc.timestamp_opt(s, 0).single())
                .ok_or_else(|| format!("bad epoch timestamp {raw:?}")),
            TimestampFormat::Pattern(pattern) => DateTime::parse_from_str(raw, pattern)
                .map(|t| t.with_timezone(&Utc))
                .or_else(|_| {
                    NaiveDateTime::parse_from_str(raw, pattern).map(|n| Utc.from_utc_datetime(&n))
                })
                .map_err(|e| format!("timestamp {raw:?} does not match {pattern:?}: {e}")),
        }
    }
}

/// How a delimiter-separated check-in file is laid out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatDescriptor {
    pub delimiter: char,
    pub has_header: bool,
    pub columns: ColumnMap,
    pub timestamp: TimestampFormat,
}

impl Default for FormatDescriptor {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: false,
            columns: ColumnMap::default(),
            timestamp: TimestampFormat::Iso8601,
        }
    }
}

/// A row that could not be turned into a check-in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based physical line number.
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCheckins {
    pub checkins: Vec<CheckIn>,
    pub errors: Vec<RowError>,
    pub users: Vocabulary,
    pub pois: Vocabulary,
}

/// Parses check-ins in input order. Malformed rows are reported in
/// [`ParsedCheckins::errors`] and skipped; only an unreadable source aborts.
pub fn parse_checkins<R: Read>(source: R, format: &FormatDescriptor) -> Result<ParsedCheckins> {
    let delimiter = u8::try_from(format.delimiter).map_err(|_| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("delimiter {:?} is not a single byte", format.delimiter),
        )
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut out = ParsedCheckins::default();
    let cols = format.columns;
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match parse_row(&record, cols, &format.timestamp) {
            Ok((user, poi, category, timestamp, geo)) => {
                let checkin = CheckIn {
                    user: UserId(out.users.intern(user)),
                    poi: PoiId(out.pois.intern(poi)),
                    category: category.to_owned(),
                    timestamp,
                    geo,
                };
                out.checkins.push(checkin);
            }
            Err(message) => out.errors.push(RowError { line, message }),
        }
    }
    Ok(out)
}

type Row<'a> = (&'a str, &'a str, &'a str, DateTime<Utc>, GeoPoint);

fn parse_row<'a>(
    record: &'a csv::StringRecord,
    cols: ColumnMap,
    ts_format: &TimestampFormat,
) -> std::result::Result<Row<'a>, String> {
    let field = |idx: usize, name: &str| {
        record
            .get(idx)
            .ok_or_else(|| format!("missing column {idx} ({name}); row has {} fields", record.len()))
    };
    let user = field(cols.user, "user_id")?;
    let poi = field(cols.poi, "poi_id")?;
    if user.is_empty() || poi.is_empty() {
        return Err("empty user or POI id".to_owned());
    }
    let category = field(cols.category, "category")?;
    let timestamp = ts_format.parse(field(cols.timestamp, "timestamp")?)?;
    let lat: f64 = field(cols.latitude, "latitude")?
        .parse()
        .map_err(|e| format!("bad latitude: {e}"))?;
    let lon: f64 = field(cols.longitude, "longitude")?
        .parse()
        .map_err(|e| format!("bad longitude: {e}"))?;
    let geo = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    Ok((user, poi, category, timestamp, geo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_fields_directly() {
        let parsed = parse_checkins(
            "u1,p7,Coffee Shop,2012-04-11T14:52:00Z,35.68,139.76\n".as_bytes(),
            &FormatDescriptor::default(),
        )
        .unwrap();
        assert!(parsed.errors.is_empty());
        let c = &parsed.checkins[0];
        assert_eq!(parsed.users.raw(c.user.0), Some("u1"));
        assert_eq!(parsed.pois.raw(c.poi.0), Some("p7"));
        assert_eq!(c.category, "Coffee Shop");
        assert_eq!(c.timestamp, Utc.with_ymd_and_hms(2012, 4, 11, 14, 52, 0).unwrap());
        assert_eq!(c.geo, GeoPoint { lat: 35.68, lon: 139.76 });
    }

    #[test]
    fn empty_file_is_empty() {
        let parsed = parse_checkins("".as_bytes(), &FormatDescriptor::default()).unwrap();
        assert!(parsed.checkins.is_empty());
        assert!(parsed.errors.is_empty());
    }

    #[test]
    fn bad_rows_are_reported_not_fatal() {
        let data = "\
u1,p1,Park,2012-04-11T14:52:00Z,35.0,139.0
u1,p2,Park,yesterday,35.0,139.0
u2,p3,Park,2012-04-11T15:00:00Z,95.0,139.0
u2,p4,Park
u2,p1,Park,2012-04-11T16:00:00Z,35.1,139.1
";
        let parsed = parse_checkins(data.as_bytes(), &FormatDescriptor::default()).unwrap();
        assert_eq!(parsed.checkins.len(), 2);
        let lines: Vec<u64> = parsed.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        // Rejected rows do not consume dense ids.
        assert_eq!(parsed.pois.len(), 1);
        assert_eq!(parsed.checkins[1].poi, PoiId(0));
    }

    #[test]
    fn configurable_layout() {
        let format = FormatDescriptor {
            delimiter: '\t',
            has_header: true,
            columns: ColumnMap {
                user: 0,
                poi: 1,
                category: 3,
                latitude: 4,
                longitude: 5,
                timestamp: 7,
            },
            timestamp: TimestampFormat::Pattern("%a %b %d %H:%M:%S %z %Y".into()),
        };
        let data = "userId\tvenueId\tcatId\tcat\tlat\tlon\toffset\tutc\n\
                    470\t49bbd6c0f964a520f4531fe3\t4bf58dd8d48988d127951735\tArts & Crafts Store\t40.71\t-74.00\t-240\tTue Apr 03 18:00:09 +0000 2012\n";
        let parsed = parse_checkins(data.as_bytes(), &format).unwrap();
        assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
        assert_eq!(parsed.checkins[0].category, "Arts & Crafts Store");
        assert_eq!(
            parsed.checkins[0].timestamp,
            Utc.with_ymd_and_hms(2012, 4, 3, 18, 0, 9).unwrap()
        );
    }

    #[test]
    fn epoch_and_offsets() {
        assert_eq!(
            TimestampFormat::EpochSeconds.parse("0").unwrap(),
            Utc.timestamp_opt(0, 0).unwrap()
        );
        assert_eq!(
            TimestampFormat::Iso8601.parse("2012-04-11T09:00:00-05:00").unwrap(),
            Utc.with_ymd_and_hms(2012, 4, 11, 14, 0, 0).unwrap()
        );
        assert!(TimestampFormat::EpochSeconds.parse("x").is_err());
    }
}
