//! Streaming JSONL corpus I/O, corpus statistics and category sharding.
//!
//! One record per line:
//!
//! ```json
//! {"video_id":"v1","duration":60.0,"category":"cooking","source":"yt","events":[{"id":0,"start":0.0,"end":60.0,"caption":"..."}],"reasoning":["..."]}
//! ```
//!
//! `source` and `reasoning` are optional. Lines that fail to ingest are never
//! dropped silently: they go to a [`QuarantineSink`] with their line number.

mod parallel;

pub use parallel::{parallel_map, ParallelMap, WorkerError};

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::fsio::AtomicFile;
use crate::numeric::CompensatedSum;
use crate::timeline::{self, Event, Timeline, ValidationPolicy};

/// Mean coverage at or above which a corpus is reported as dense.
pub const DENSE_COVERAGE_THRESHOLD: f64 = 0.9;

pub const DEFAULT_CATEGORIES: [&str; 10] =
    ["travel", "diy", "tech review", "cooking", "sports", "gaming", "education", "vlog", "news", "music"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] io::Error),
}

impl CorpusError {
    fn at(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
        move |source| CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// The configured set of video categories. Matching ignores ASCII case and
/// surrounding whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategorySet(Vec<String>);

impl Default for CategorySet {
    fn default() -> Self {
        CategorySet(DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect())
    }
}

impl CategorySet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        CategorySet(names.into_iter().map(Into::into).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    /// The configured spelling of `name`, if it is a known category.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        let name = name.trim();
        self.0.iter().find(|c| c.eq_ignore_ascii_case(name)).map(String::as_str)
    }

    /// File-name form of a category: lowercase, runs of non-alphanumerics as `-`.
    pub fn slug(name: &str) -> String {
        let mut out = String::new();
        for ch in name.trim().chars() {
            if ch.is_ascii_alphanumeric() {
                out.push(ch.to_ascii_lowercase());
            } else if !out.ends_with('-') && !out.is_empty() {
                out.push('-');
            }
        }
        while out.ends_with('-') {
            out.pop();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub timeline: Timeline,
    pub category: String,
    pub source: Option<String>,
    pub reasoning: Option<Vec<String>>,
}

impl CorpusRecord {
    pub fn new(timeline: Timeline, category: impl Into<String>) -> Self {
        CorpusRecord { timeline, category: category.into(), source: None, reasoning: None }
    }

    pub fn video_id(&self) -> &str {
        &self.timeline.video_id
    }
}

#[derive(Deserialize)]
struct RecordRepr {
    video_id: String,
    duration: f64,
    category: String,
    #[serde(default)]
    source: Option<String>,
    events: Vec<Event>,
    #[serde(default)]
    reasoning: Option<Vec<String>>,
}

#[derive(Serialize)]
struct RecordReprRef<'a> {
    video_id: &'a str,
    duration: f64,
    category: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
    events: &'a [Event],
    #[serde(skip_serializing_if = "Option::is_none")]
    reasoning: Option<&'a [String]>,
}

impl Serialize for CorpusRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RecordReprRef {
            video_id: &self.timeline.video_id,
            duration: self.timeline.duration,
            category: &self.category,
            source: self.source.as_deref(),
            events: &self.timeline.events,
            reasoning: self.reasoning.as_deref(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CorpusRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = RecordRepr::deserialize(deserializer)?;
        Ok(CorpusRecord {
            timeline: Timeline { video_id: r.video_id, duration: r.duration, events: r.events },
            category: r.category,
            source: r.source,
            reasoning: r.reasoning,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuarantineStage {
    Schema,
    Category,
    Validation,
    Worker,
    /// Too few events to mask.
    Mask,
    /// Reasoning could not be attached.
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    /// 1-based line number in the source file (record ordinal for in-memory streams).
    pub line: u64,
    pub stage: QuarantineStage,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub video_id: Option<String>,
    pub reason: String,
    pub raw: String,
}

/// Destination for records that fail ingestion.
pub trait QuarantineSink {
    fn quarantine(&mut self, entry: QuarantineEntry) -> io::Result<()>;
}

impl QuarantineSink for Vec<QuarantineEntry> {
    fn quarantine(&mut self, entry: QuarantineEntry) -> io::Result<()> {
        self.push(entry);
        Ok(())
    }
}

impl QuarantineSink for AtomicFile {
    fn quarantine(&mut self, entry: QuarantineEntry) -> io::Result<()> {
        self.write_json_line(&entry)
    }
}

impl<S: QuarantineSink + ?Sized> QuarantineSink for &mut S {
    fn quarantine(&mut self, entry: QuarantineEntry) -> io::Result<()> {
        (**self).quarantine(entry)
    }
}

/// Drops quarantined entries (they are still counted by the stream).
pub struct Discard;

impl QuarantineSink for Discard {
    fn quarantine(&mut self, _: QuarantineEntry) -> io::Result<()> {
        Ok(())
    }
}

/// Turns one JSONL line into a record, or says why it cannot be one.
#[derive(Debug, Clone, Default)]
pub struct Ingestor {
    /// When set, records outside the category set are quarantined.
    pub categories: Option<CategorySet>,
    /// When set, records whose timeline does not validate are quarantined.
    pub policy: Option<ValidationPolicy>,
}

impl Ingestor {
    pub fn schema_only() -> Self {
        Ingestor::default()
    }

    pub fn strict(categories: CategorySet, policy: ValidationPolicy) -> Self {
        Ingestor { categories: Some(categories), policy: Some(policy) }
    }

    pub fn ingest(&self, line: u64, bytes: &[u8]) -> Result<CorpusRecord, QuarantineEntry> {
        let raw = || String::from_utf8_lossy(bytes).into_owned();
        let record: CorpusRecord = serde_json::from_slice(bytes).map_err(|e| QuarantineEntry {
            line,
            stage: QuarantineStage::Schema,
            video_id: None,
            reason: e.to_string(),
            raw: raw(),
        })?;
        if let Some(categories) = &self.categories {
            if categories.canonical(&record.category).is_none() {
                return Err(QuarantineEntry {
                    line,
                    stage: QuarantineStage::Category,
                    video_id: Some(record.timeline.video_id),
                    reason: format!("unknown category {:?}", record.category),
                    raw: raw(),
                });
            }
        }
        if let Some(policy) = &self.policy {
            let report = timeline::validate(&record.timeline, policy);
            if !report.is_clean() {
                return Err(QuarantineEntry {
                    line,
                    stage: QuarantineStage::Validation,
                    video_id: Some(record.timeline.video_id),
                    reason: report.to_string(),
                    raw: raw(),
                });
            }
        }
        Ok(record)
    }
}

/// Non-blank lines of a reader with their 1-based line numbers.
struct NumberedLines<R> {
    reader: R,
    line: u64,
}

impl<R: BufRead> Iterator for NumberedLines<R> {
    type Item = io::Result<(u64, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut buf = Vec::new();
            match self.reader.read_until(b'\n', &mut buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line += 1;
                    while matches!(buf.last(), Some(b'\n' | b'\r')) {
                        buf.pop();
                    }
                    if buf.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    return Some(Ok((self.line, buf)));
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounts {
    /// Non-blank input lines seen.
    pub lines: u64,
    pub records: u64,
    pub quarantined: u64,
}

type Ingested = io::Result<Result<CorpusRecord, QuarantineEntry>>;

/// Lazily ingested records. Quarantined lines go to the sink as they are met.
pub struct RecordStream<S> {
    inner: Box<dyn Iterator<Item = Ingested> + Send>,
    sink: S,
    counts: StreamCounts,
}

impl<S: QuarantineSink> RecordStream<S> {
    /// Streams records from `reader`, ingesting with `workers` threads.
    pub fn from_reader<R>(reader: R, ingestor: Ingestor, workers: usize, sink: S) -> Self
    where
        R: BufRead + Send + 'static,
    {
        let lines = NumberedLines { reader, line: 0 };
        let inner = parallel_map(lines, workers, move |item: io::Result<(u64, Vec<u8>)>| {
            item.map(|(line, bytes)| ingestor.ingest(line, &bytes))
        })
        .enumerate()
        .map(|(i, r)| match r {
            Ok(ingested) => ingested,
            Err(e) => Ok(Err(QuarantineEntry {
                line: i as u64 + 1,
                stage: QuarantineStage::Worker,
                video_id: None,
                reason: e.message,
                raw: String::new(),
            })),
        });
        RecordStream { inner: Box::new(inner), sink, counts: StreamCounts::default() }
    }

    pub fn open(path: &Path, ingestor: Ingestor, workers: usize, sink: S) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(CorpusError::at(path))?;
        Ok(Self::from_reader(BufReader::with_capacity(1 << 16, file), ingestor, workers, sink))
    }

    pub fn counts(&self) -> StreamCounts {
        self.counts
    }

    pub fn into_sink(self) -> S {
        self.sink
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }
}

impl<S: QuarantineSink> Iterator for RecordStream<S> {
    type Item = Result<CorpusRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.inner.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(Ok(record)) => {
                    self.counts.lines += 1;
                    self.counts.records += 1;
                    return Some(Ok(record));
                }
                Ok(Err(entry)) => {
                    self.counts.lines += 1;
                    self.counts.quarantined += 1;
                    if let Err(e) = self.sink.quarantine(entry) {
                        return Some(Err(e.into()));
                    }
                }
            }
        }
    }
}

/// Opens a corpus for sequential, schema-checked reading. Malformed lines
/// are collected in the stream's sink.
pub fn read_stream(path: &Path) -> Result<RecordStream<Vec<QuarantineEntry>>, CorpusError> {
    RecordStream::open(path, Ingestor::schema_only(), 1, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageClass {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub video_count: u64,
    pub total_hours: f64,
    pub events_per_video_mean: f64,
    /// Pooled: total events per total minutes of video.
    pub events_per_minute_mean: f64,
    pub mean_coverage: f64,
    pub coverage_class: CoverageClass,
    pub per_category_counts: BTreeMap<String, u64>,
    /// Caption length in whitespace-separated tokens → number of captions.
    pub caption_length_histogram: BTreeMap<usize, u64>,
}

/// Single-pass accumulator behind [`compute_stats`]. Partial accumulators can
/// be merged.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    videos: u64,
    events: u64,
    seconds: CompensatedSum,
    coverage: CompensatedSum,
    per_category: BTreeMap<String, u64>,
    caption_lengths: BTreeMap<usize, u64>,
}

impl StatsAccumulator {
    pub fn push(&mut self, record: &CorpusRecord) {
        let t = &record.timeline;
        self.videos += 1;
        self.events += t.events.len() as u64;
        self.seconds.add(t.duration);
        self.coverage.add(timeline::coverage_ratio(t).unwrap_or(0.0));
        *self.per_category.entry(record.category.trim().to_lowercase()).or_default() += 1;
        for e in &t.events {
            *self.caption_lengths.entry(e.caption.split_whitespace().count()).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.videos += other.videos;
        self.events += other.events;
        self.seconds.merge(&other.seconds);
        self.coverage.merge(&other.coverage);
        for (k, v) in &other.per_category {
            *self.per_category.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.caption_lengths {
            *self.caption_lengths.entry(*k).or_default() += v;
        }
    }

    pub fn finish(&self) -> CorpusStats {
        let seconds = self.seconds.value();
        let videos = self.videos as f64;
        let events = self.events as f64;
        let (per_video, per_minute, coverage) = if self.videos == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let per_minute = if seconds > 0.0 { timeline::events_per_minute(events, seconds) } else { 0.0 };
            (events / videos, per_minute, self.coverage.value() / videos)
        };
        CorpusStats {
            video_count: self.videos,
            total_hours: seconds / 3600.0,
            events_per_video_mean: per_video,
            events_per_minute_mean: per_minute,
            mean_coverage: coverage,
            coverage_class: if self.videos > 0 && coverage >= DENSE_COVERAGE_THRESHOLD {
                CoverageClass::Dense
            } else {
                CoverageClass::Sparse
            },
            per_category_counts: self.per_category.clone(),
            caption_length_histogram: self.caption_lengths.clone(),
        }
    }
}

pub fn compute_stats<I>(records: I) -> CorpusStats
where
    I: IntoIterator,
    I::Item: Borrow<CorpusRecord>,
{
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.push(r.borrow());
    }
    acc.finish()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub shards: BTreeMap<String, PathBuf>,
    pub counts: BTreeMap<String, u64>,
    pub quarantined: u64,
}

/// Splits records into one `<category-slug>.jsonl` shard per category seen.
///
/// Records keep their relative order within a shard. Records with an unknown
/// category are quarantined. Shards are written atomically.
pub fn partition_by_category<I, S>(
    records: I,
    categories: &CategorySet,
    out_dir: &Path,
    mut sink: S,
) -> Result<PartitionReport, CorpusError>
where
    I: IntoIterator<Item = CorpusRecord>,
    S: QuarantineSink,
{
    std::fs::create_dir_all(out_dir).map_err(CorpusError::at(out_dir))?;
    let mut writers: BTreeMap<String, AtomicFile> = BTreeMap::new();
    let mut report = PartitionReport::default();
    for (i, record) in records.into_iter().enumerate() {
        let Some(category) = categories.canonical(&record.category) else {
            report.quarantined += 1;
            sink.quarantine(QuarantineEntry {
                line: i as u64 + 1,
                stage: QuarantineStage::Category,
                video_id: Some(record.timeline.video_id.clone()),
                reason: format!("unknown category {:?}", record.category),
                raw: serde_json::to_string(&record).unwrap_or_default(),
            })?;
            continue;
        };
        if !writers.contains_key(category) {
            let path = out_dir.join(format!("{}.jsonl", CategorySet::slug(category)));
            writers.insert(category.to_string(), AtomicFile::create(&path).map_err(CorpusError::at(&path))?);
        }
        let writer = writers.get_mut(category).expect("inserted above");
        writer.write_json_line(&record).map_err(CorpusError::at(out_dir))?;
        *report.counts.entry(category.to_string()).or_default() += 1;
    }
    for (category, writer) in writers {
        let path = writer.commit().map_err(CorpusError::at(out_dir))?;
        report.shards.insert(category, path);
    }
    Ok(report)
}
