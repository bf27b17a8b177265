//! Reading patient rows from CSV or JSON.
//!
//! Schema (one row per patient-ear):
//! `id, ear, gender, age, date, ag250, ag500, ag1000, ag1500, ag2000, ag3000,
//! ag4000, ag6000, ag8000, wrs60, wrs80, wrs100, wrs110`.
//! Thresholds are dB HL, scores percent; blank (CSV) or `null` (JSON) means
//! not measured.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::audiogram::{impute_audiogram, HlToSpl, PartialAudiogram};
use super::record::{
    is_valid_wrs, select_better_ear, Ear, PatientRecord, SpeechMeasurement, SpeechPoint, TieBreak, SPEECH_LEVELS,
};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 18] = [
    "id", "ear", "gender", "age", "date", "ag250", "ag500", "ag1000", "ag1500", "ag2000", "ag3000", "ag4000", "ag6000",
    "ag8000", "wrs60", "wrs80", "wrs100", "wrs110",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Json,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "json" => Ok(InputFormat::Json),
            other => Err(Error::Config(format!("unknown input format '{other}'"))),
        }
    }
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(InputFormat::Csv),
            "json" => Some(InputFormat::Json),
            _ => None,
        }
    }
}

/// One row exactly as stored in the input file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub id: String,
    pub ear: String,
    #[serde(default)]
    pub gender: Option<String>,
    #[serde(default)]
    pub age: Option<f64>,
    #[serde(default)]
    pub date: Option<String>,
    #[serde(default)]
    pub ag250: Option<f64>,
    #[serde(default)]
    pub ag500: Option<f64>,
    #[serde(default)]
    pub ag1000: Option<f64>,
    #[serde(default)]
    pub ag1500: Option<f64>,
    #[serde(default)]
    pub ag2000: Option<f64>,
    #[serde(default)]
    pub ag3000: Option<f64>,
    #[serde(default)]
    pub ag4000: Option<f64>,
    #[serde(default)]
    pub ag6000: Option<f64>,
    #[serde(default)]
    pub ag8000: Option<f64>,
    #[serde(default)]
    pub wrs60: Option<f64>,
    #[serde(default)]
    pub wrs80: Option<f64>,
    #[serde(default)]
    pub wrs100: Option<f64>,
    #[serde(default)]
    pub wrs110: Option<f64>,
}

impl RawRow {
    pub fn audiogram(&self) -> PartialAudiogram {
        [
            self.ag250,
            self.ag500,
            self.ag1000,
            self.ag1500,
            self.ag2000,
            self.ag3000,
            self.ag4000,
            self.ag6000,
            self.ag8000,
        ]
    }

    pub fn speech(&self) -> [Option<f64>; 4] {
        [self.wrs60, self.wrs80, self.wrs100, self.wrs110]
    }

    pub fn from_record(r: &PatientRecord) -> Self {
        let m = r.audiogram.measured();
        let mut speech = [None; 4];
        for p in r.speech.points() {
            if let Some(i) = SPEECH_LEVELS.iter().position(|&l| l == p.level) {
                speech[i] = Some(p.wrs);
            }
        }
        RawRow {
            id: r.id.clone(),
            ear: r.ear.to_string(),
            gender: r.gender.clone(),
            age: r.age_years,
            date: r.test_date.clone(),
            ag250: m[0],
            ag500: m[1],
            ag1000: m[2],
            ag1500: m[3],
            ag2000: m[4],
            ag3000: m[5],
            ag4000: m[6],
            ag6000: m[7],
            ag8000: m[8],
            wrs60: speech[0],
            wrs80: speech[1],
            wrs100: speech[2],
            wrs110: speech[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowIssue {
    pub line: usize,
    pub message: String,
}

/// Result of reading and cleaning an input file.
///
/// `rows_read = rejected + no_audiogram + no_speech + superseded + merged + records`
/// where `records` holds one entry per (patient, ear).
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<PatientRecord>,
    pub rows_read: usize,
    pub rejected: Vec<RowIssue>,
    pub excluded_no_audiogram: usize,
    pub excluded_no_speech: usize,
    /// Rows dropped because an earlier session of the same ear exists.
    pub superseded_sessions: usize,
    /// Same-day rows folded into another row of the same ear.
    pub merged_rows: usize,
    pub warnings: Vec<String>,
}

pub fn read_rows<R: Read>(reader: R, format: InputFormat) -> Result<Vec<(usize, std::result::Result<RawRow, String>)>> {
    match format {
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
            let headers = rdr.headers()?.clone();
            if let Some(missing) = CSV_HEADER.iter().find(|h| !headers.iter().any(|x| x == **h)) {
                return Err(Error::Row { line: 1, message: format!("missing column '{missing}'") });
            }
            let mut out = Vec::new();
            for rec in rdr.records() {
                match rec {
                    Ok(rec) => {
                        let line = rec.position().map_or(0, |p| p.line() as usize);
                        let row = rec.deserialize::<RawRow>(Some(&headers)).map_err(|e| e.to_string());
                        out.push((line, row));
                    }
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line() as usize);
                        out.push((line, Err(e.to_string())));
                    }
                }
            }
            Ok(out)
        }
        InputFormat::Json => {
            let values: Vec<serde_json::Value> = serde_json::from_reader(reader)?;
            Ok(values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (i + 1, serde_json::from_value::<RawRow>(v).map_err(|e| e.to_string())))
                .collect())
        }
    }
}

pub fn ingest(path: &Path, format: InputFormat, offsets: &HlToSpl) -> Result<IngestReport> {
    let file = BufReader::new(File::open(path)?);
    ingest_reader(file, format, offsets)
}

struct ValidRow {
    line: usize,
    raw: RawRow,
    ear: Ear,
}

fn validate_row(line: usize, raw: RawRow) -> std::result::Result<ValidRow, RowIssue> {
    let issue = |message: String| RowIssue { line, message };
    if raw.id.trim().is_empty() {
        return Err(issue("empty id".into()));
    }
    let ear = raw.ear.parse::<Ear>().map_err(|e| issue(e.to_string()))?;
    for v in raw.audiogram().iter().flatten() {
        if !v.is_finite() {
            return Err(issue(format!("non-finite threshold {v}")));
        }
    }
    for (level, v) in SPEECH_LEVELS.iter().zip(raw.speech()) {
        if let Some(w) = v {
            if !is_valid_wrs(w) {
                return Err(issue(format!("WRS {w} at {level} dB SPL is not a multiple of 5 in [0, 100]")));
            }
        }
    }
    if let Some(d) = &raw.date {
        if !is_iso_date(d) {
            return Err(issue(format!("date '{d}' is not YYYY-MM-DD")));
        }
    }
    Ok(ValidRow { line, raw, ear })
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

pub fn ingest_reader<R: Read>(reader: R, format: InputFormat, offsets: &HlToSpl) -> Result<IngestReport> {
    let rows = read_rows(reader, format)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut report = IngestReport { rows_read: rows.len(), ..Default::default() };

    let mut groups: BTreeMap<(String, Ear), Vec<ValidRow>> = BTreeMap::new();
    for (line, row) in rows {
        let raw = match row {
            Ok(raw) => raw,
            Err(message) => {
                report.rejected.push(RowIssue { line, message });
                continue;
            }
        };
        let valid = match validate_row(line, raw) {
            Ok(v) => v,
            Err(issue) => {
                report.rejected.push(issue);
                continue;
            }
        };
        if valid.raw.audiogram().iter().all(Option::is_none) {
            report.excluded_no_audiogram += 1;
            continue;
        }
        if valid.raw.speech().iter().all(Option::is_none) {
            report.excluded_no_speech += 1;
            continue;
        }
        groups.entry((valid.raw.id.clone(), valid.ear)).or_default().push(valid);
    }

    for ((id, ear), mut sessions) in groups {
        // earliest session first; undated rows sort last
        sessions.sort_by(|a, b| match (&a.raw.date, &b.raw.date) {
            (Some(x), Some(y)) => x.cmp(y).then(a.line.cmp(&b.line)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.line.cmp(&b.line),
        });
        let first_date = sessions[0].raw.date.clone();
        let (same_day, later): (Vec<_>, Vec<_>) = sessions.into_iter().partition(|s| s.raw.date == first_date);
        report.superseded_sessions += later.len();
        report.merged_rows += same_day.len() - 1;

        let mut audiogram: PartialAudiogram = [None; 9];
        let mut speech: [Option<f64>; 4] = [None; 4];
        for s in &same_day {
            for (slot, v) in audiogram.iter_mut().zip(s.raw.audiogram()) {
                if slot.is_none() {
                    *slot = v;
                }
            }
            for (i, v) in s.raw.speech().into_iter().enumerate() {
                if let Some(w) = v {
                    if let Some(prev) = speech[i] {
                        report.warnings.push(format!(
                            "line {}: duplicate measurement for {id} {ear} at {} dB SPL, keeping the higher WRS",
                            s.line, SPEECH_LEVELS[i]
                        ));
                        speech[i] = Some(prev.max(w));
                    } else {
                        speech[i] = Some(w);
                    }
                }
            }
        }
        let first = &same_day[0];
        let points: Vec<SpeechPoint> =
            SPEECH_LEVELS.iter().zip(speech).filter_map(|(&l, w)| w.map(|w| SpeechPoint::new(l, w))).collect();
        let audiogram = match impute_audiogram(&audiogram) {
            Ok(a) => a,
            Err(e) => {
                report.rejected.push(RowIssue { line: first.line, message: e.to_string() });
                continue;
            }
        };
        let speech = match SpeechMeasurement::new(points) {
            Ok(s) => s,
            Err(e) => {
                report.rejected.push(RowIssue { line: first.line, message: e.to_string() });
                continue;
            }
        };
        let mut record = PatientRecord::new(id, ear, audiogram, speech, offsets);
        record.gender = first.raw.gender.clone().filter(|g| !g.is_empty());
        record.age_years = first.raw.age;
        record.test_date = first.raw.date.clone();
        report.records.push(record);
    }
    Ok(report)
}

/// Reduces per-ear records to one record per patient (the better ear), sorted by id.
pub fn select_better_ears(records: Vec<PatientRecord>, tie: TieBreak) -> Vec<PatientRecord> {
    let mut by_id: BTreeMap<String, (Option<PatientRecord>, Option<PatientRecord>)> = BTreeMap::new();
    for r in records {
        let slot = by_id.entry(r.id.clone()).or_default();
        match r.ear {
            Ear::Left => slot.0 = Some(r),
            Ear::Right => slot.1 = Some(r),
        }
    }
    by_id.into_values().filter_map(|(l, r)| select_better_ear(l, r, tie)).collect()
}

/// Writes rows in the documented CSV schema.
pub fn write_csv<W: Write>(rows: &[RawRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
