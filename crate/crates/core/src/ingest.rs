//! Retweet event logs: parsing, persistent-user trimming and time windows.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_WINDOW_LEN: i64 = 7 * SECONDS_PER_DAY;
pub const DEFAULT_ERROR_LIMIT: f64 = 0.01;

/// One retweet: `retweeter` shared a post by `influencer` at `timestamp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetweetEvent {
    pub retweeter: String,
    pub influencer: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(rename = "sample")]
    pub sample_id: String,
}

/// A topical sample and the date range its events must fall in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub sample_id: String,
    pub start: i64,
    pub end: i64,
    #[serde(default)]
    pub source_paths: Vec<PathBuf>,
}

impl SampleSpec {
    pub fn new(sample_id: impl Into<String>, start: i64, end: i64) -> Result<Self> {
        let spec = SampleSpec {
            sample_id: sample_id.into(),
            start,
            end,
            source_paths: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::Config("sample id must not be empty".into()));
        }
        if self.start >= self.end {
            return Err(Error::Config(format!(
                "sample {}: start {} must precede end {}",
                self.sample_id, self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts < self.end
    }
}

/// Checks that sample ids are unique within one configuration.
pub fn validate_samples(specs: &[SampleSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(s.sample_id.as_str()) {
            return Err(Error::Config(format!("duplicate sample id {}", s.sample_id)));
        }
    }
    Ok(())
}

/// Half-open time slice `[start, end)` of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub sample_id: String,
    pub window_index: usize,
    pub start: i64,
    pub end: i64,
}

/// A window together with the events it contains.
#[derive(Debug, Clone)]
pub struct WindowEvents {
    pub window: TimeWindow,
    pub events: Vec<RetweetEvent>,
}

impl WindowEvents {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Jsonl,
    Csv,
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(EventFormat::Jsonl),
            "csv" => Ok(EventFormat::Csv),
            other => Err(Error::Config(format!("unknown event format {other:?}"))),
        }
    }
}

impl fmt::Display for EventFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventFormat::Jsonl => f.write_str("jsonl"),
            EventFormat::Csv => f.write_str("csv"),
        }
    }
}

/// Events plus the tallies of everything that was not turned into an event.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub events: Vec<RetweetEvent>,
    pub records: usize,
    pub malformed: usize,
    pub out_of_range: usize,
    pub self_retweets: usize,
    /// Up to the first ten per-record error messages.
    pub errors: Vec<String>,
}

impl ParseOutcome {
    fn reject(&mut self, msg: String) {
        self.malformed += 1;
        if self.errors.len() < 10 {
            self.errors.push(msg);
        }
    }

    fn merge(&mut self, other: ParseOutcome) {
        self.events.extend(other.events);
        self.records += other.records;
        self.malformed += other.malformed;
        self.out_of_range += other.out_of_range;
        self.self_retweets += other.self_retweets;
        for e in other.errors {
            if self.errors.len() < 10 {
                self.errors.push(e);
            }
        }
    }
}

/// User ids show up as strings or as bare integers in the wild.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Int(u64),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Text(s) => s,
            RawId::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    retweeter: RawId,
    influencer: RawId,
    ts: i64,
}

/// Parses a JSONL or CSV event stream for one sample.
///
/// Records outside `[spec.start, spec.end)` and self-retweets are dropped
/// with a tally. Malformed records are tallied too; if their share of all
/// records exceeds `error_limit` the whole parse fails.
pub fn parse_events<R: Read>(
    stream: R,
    format: EventFormat,
    spec: &SampleSpec,
    error_limit: f64,
) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    let accept = |out: &mut ParseOutcome, rec: RawRecord| {
        let retweeter = rec.retweeter.into_string();
        let influencer = rec.influencer.into_string();
        if retweeter.is_empty() || influencer.is_empty() {
            out.reject(format!("record {}: empty user id", out.records));
        } else if retweeter == influencer {
            out.self_retweets += 1;
        } else if !spec.contains(rec.ts) {
            out.out_of_range += 1;
        } else {
            out.events.push(RetweetEvent {
                retweeter,
                influencer,
                timestamp: rec.ts,
                sample_id: spec.sample_id.clone(),
            });
        }
    };

    match format {
        EventFormat::Jsonl => {
            let reader = BufReader::new(stream);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io("<event stream>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                out.records += 1;
                match serde_json::from_str::<RawRecord>(&line) {
                    Ok(rec) => accept(&mut out, rec),
                    Err(e) => out.reject(format!("line {}: {e}", lineno + 1)),
                }
            }
        }
        EventFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(stream);
            let headers = reader.headers()?.clone();
            for required in ["retweeter", "influencer", "ts"] {
                if !headers.iter().any(|h| h == required) {
                    return Err(Error::Parse(format!("csv header lacks column {required:?}")));
                }
            }
            for (i, rec) in reader.deserialize::<RawRecord>().enumerate() {
                out.records += 1;
                match rec {
                    Ok(rec) => accept(&mut out, rec),
                    Err(e) if e.is_io_error() => {
                        return Err(Error::Parse(format!("csv read: {e}")));
                    }
                    Err(e) => out.reject(format!("row {}: {e}", i + 2)),
                }
            }
        }
    }

    check_error_budget(&out, error_limit)?;
    Ok(out)
}

fn check_error_budget(out: &ParseOutcome, error_limit: f64) -> Result<()> {
    if out.records > 0 && (out.malformed as f64) / (out.records as f64) > error_limit {
        return Err(Error::TooManyMalformed {
            bad: out.malformed,
            total: out.records,
            limit: error_limit,
            first: out.errors.first().cloned().unwrap_or_default(),
        });
    }
    Ok(())
}

/// Parses every file of a sample. Files are read in path-sorted order so
/// the concatenation is deterministic; parsing itself may run in parallel.
pub fn parse_files(
    paths: &[PathBuf],
    format: EventFormat,
    spec: &SampleSpec,
    error_limit: f64,
) -> Result<ParseOutcome> {
    let mut sorted: Vec<&PathBuf> = paths.iter().collect();
    sorted.sort();
    let parsed = crate::parallel::map_slice(&sorted, |p| -> Result<ParseOutcome> {
        let f = std::fs::File::open(p).map_err(|e| Error::io(*p, e))?;
        // Budget is enforced on the combined tally below.
        parse_events(f, format, spec, f64::INFINITY)
    });
    let mut out = ParseOutcome::default();
    for p in parsed {
        out.merge(p?);
    }
    check_error_budget(&out, error_limit)?;
    Ok(out)
}

/// Keeps the events whose retweeter is in `active`. Influencers are not
/// filtered here.
pub fn filter_persistent(events: &[RetweetEvent], active: &HashSet<String>) -> Result<Vec<RetweetEvent>> {
    if active.is_empty() {
        return Err(Error::Config(
            "active-user set is empty; it would remove every event".into(),
        ));
    }
    Ok(events
        .iter()
        .filter(|e| active.contains(&e.retweeter))
        .cloned()
        .collect())
}

/// Active set derived from the corpus: retweeters with at least `min_events`
/// events.
pub fn derive_active_users(events: &[RetweetEvent], min_events: usize) -> HashSet<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events {
        *counts.entry(&e.retweeter).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_events)
        .map(|(u, _)| u.to_string())
        .collect()
}

/// Reads a persistent-user list: one id per line, `#` starts a comment.
pub fn read_active_users<R: Read>(reader: R) -> Result<HashSet<String>> {
    let mut set = HashSet::new();
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| Error::io("<active users>", e))?;
        let id = line.split('#').next().unwrap_or("").trim();
        if !id.is_empty() {
            set.insert(id.to_string());
        }
    }
    Ok(set)
}

pub fn read_active_users_file(path: &Path) -> Result<HashSet<String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_active_users(f)
}

/// Number of windows needed to cover `[start, end)` with the given length
/// and step. The last window may extend past `end`.
pub fn window_count(start: i64, end: i64, window_len: i64, step: i64) -> usize {
    let range = end - start;
    if range <= window_len {
        1
    } else {
        let extra = range - window_len;
        (extra + step - 1) as usize / step as usize + 1
    }
}

/// Slices one sample's events into windows of `window_len` seconds starting
/// every `step` seconds from `spec.start`. Empty windows are kept so window
/// indices stay aligned across runs.
pub fn partition_windows(
    events: &[RetweetEvent],
    spec: &SampleSpec,
    window_len: i64,
    step: i64,
) -> Result<Vec<WindowEvents>> {
    if window_len <= 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    if step <= 0 || step > window_len {
        return Err(Error::Config(format!(
            "window step {step} must lie in (0, {window_len}]"
        )));
    }
    spec.validate()?;
    let n = window_count(spec.start, spec.end, window_len, step);
    let mut windows: Vec<WindowEvents> = (0..n)
        .map(|i| {
            let start = spec.start + i as i64 * step;
            WindowEvents {
                window: TimeWindow {
                    sample_id: spec.sample_id.clone(),
                    window_index: i,
                    start,
                    end: start + window_len,
                },
                events: Vec::new(),
            }
        })
        .collect();

    for e in events {
        if e.sample_id != spec.sample_id {
            return Err(Error::Integrity(format!(
                "event from sample {} passed to windows of sample {}",
                e.sample_id, spec.sample_id
            )));
        }
        if !spec.contains(e.timestamp) {
            continue;
        }
        let offset = e.timestamp - spec.start;
        // Window i holds t iff i*step <= offset < i*step + len.
        let last = (offset / step) as usize;
        let first_num = offset - window_len + 1;
        let first = if first_num <= 0 {
            0
        } else {
            ((first_num + step - 1) / step) as usize
        };
        for w in windows.iter_mut().take(last.min(n - 1) + 1).skip(first) {
            w.events.push(e.clone());
        }
    }
    Ok(windows)
}

/// Writes events in the normalized JSONL schema (`retweeter`, `influencer`,
/// `ts`, `sample`).
pub fn write_events_jsonl<W: Write>(mut w: W, events: &[RetweetEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<event sink>", e))?;
    }
    Ok(())
}

/// Reads a normalized event file; every line must carry its `sample` key.
pub fn read_events_jsonl<R: Read>(reader: R) -> Result<Vec<RetweetEvent>> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<event stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: RetweetEvent =
            serde_json::from_str(&line).map_err(|err| Error::Parse(format!("line {}: {err}", i + 1)))?;
        events.push(e);
    }
    Ok(events)
}

/// Parses `YYYY-MM-DD` (midnight UTC) or an RFC 3339 timestamp into epoch
/// seconds.
pub fn parse_iso_date(s: &str) -> Result<i64> {
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight is valid").and_utc().timestamp());
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| Error::Config(format!("bad date {s:?}: {e}")))
}
