//! End-to-end dataset construction and the file-level operations behind each
//! CLI subcommand.
//!
//! Pipeline stages: ingest (schema, category, validation) -> motion filter
//! (optional) -> coherence judge -> mask + render -> reasoning (optional).
//! Every stage streams in input order. Outputs in `output_dir`:
//!
//! | file | content |
//! |---|---|
//! | `kept.jsonl` | records that passed the coherence judge |
//! | `train.jsonl` | one training record per kept record |
//! | `quarantine.jsonl` | ingest rejects, then mask and reasoning rejects |
//! | `drop_log.jsonl` | motion drops, then coherence drops |
//! | `stats.json` | statistics of `kept.jsonl` |
//! | `manifest.json` | config echo, judge, template hash, per-stage counts |
//!
//! No output depends on wall-clock time or on the worker count.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coherence::{
    filter_corpus, DropEntry, HeuristicJudge, Judge, Judged, LlmJudge, MotionRecord, MotionSplit,
    DEFAULT_HEURISTIC_THRESHOLD,
};
use crate::corpus::{
    parallel_map, partition_by_category, CategorySet, CorpusError, CorpusRecord, CorpusStats, Ingestor, PartitionReport,
    QuarantineEntry, QuarantineStage, RecordStream, StatsAccumulator, StreamCounts, DEFAULT_CATEGORIES,
};
use crate::fim::{attach_reasoning, mask_event, sample_mask, LabelMode, MaskedSample, PromptTemplate, TrainingRecord};
use crate::fsio::{write_json_pretty, AtomicFile};
use crate::llm::{ChatParams, ClientConfig, LlmClient, LlmError};
use crate::timeline::ValidationPolicy;

pub const KEPT_FILE: &str = "kept.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const DROP_LOG_FILE: &str = "drop_log.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const DEFAULT_MOTION_THRESHOLD: f64 = 0.02;
/// Upper bound on concurrent LLM calls when the worker count is defaulted.
pub const MAX_DEFAULT_LLM_WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Logical core count.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    #[default]
    Heuristic,
    /// Live chat endpoint.
    Llm,
    /// Chat responses from `llm.fixture`.
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    /// Replay fixture; used by the replay judge and, with the heuristic
    /// judge, for reasoning.
    pub fixture: Option<PathBuf>,
    pub client: ClientConfig,
    pub params: ChatParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub motion_manifest: Option<PathBuf>,
    #[serde(default = "default_motion_threshold")]
    pub motion_threshold: f64,
    #[serde(default)]
    pub policy: ValidationPolicy,
    #[serde(default = "default_categories")]
    pub categories: CategorySet,
    #[serde(default)]
    pub judge: JudgeKind,
    #[serde(default = "default_heuristic_threshold")]
    pub heuristic_threshold: f64,
    #[serde(default)]
    pub llm: LlmSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_min_events")]
    pub min_events: usize,
    /// Attach reasoning to every training record in this mode; `null` skips it.
    #[serde(default)]
    pub reasoning: Option<LabelMode>,
}

fn default_motion_threshold() -> f64 {
    DEFAULT_MOTION_THRESHOLD
}

fn default_categories() -> CategorySet {
    CategorySet::new(DEFAULT_CATEGORIES)
}

fn default_heuristic_threshold() -> f64 {
    DEFAULT_HEURISTIC_THRESHOLD
}

fn default_template() -> String {
    PromptTemplate::canonical().name
}

fn default_min_events() -> usize {
    crate::fim::DEFAULT_MIN_EVENTS
}

/// Applies one `key.path=value` override. The value is read as JSON when it
/// parses, as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(PipelineError::Config(format!("override {key:?} descends into a non-object")));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses a config document after applying `overrides` in order.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self, PipelineError> {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: PipelineConfig = serde_json::from_value(doc).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file. Relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_value(doc, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.output_dir);
        if let Some(p) = self.motion_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.llm.fixture.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.motion_threshold) {
            return bad(format!("motion_threshold {} is outside [0, 1]", self.motion_threshold));
        }
        if !(0.0..=1.0).contains(&self.heuristic_threshold) {
            return bad(format!("heuristic_threshold {} is outside [0, 1]", self.heuristic_threshold));
        }
        let tol = self.policy.coverage_tolerance;
        if !(tol.is_finite() && tol >= 0.0) {
            return bad(format!("policy.coverage_tolerance {tol} must be a non-negative number"));
        }
        if self.min_events == 0 {
            return bad("min_events must be at least 1".into());
        }
        if PromptTemplate::by_name(&self.template).is_none() {
            return bad(format!("unknown template {:?}", self.template));
        }
        if self.judge == JudgeKind::Replay && self.llm.fixture.is_none() {
            return bad("judge \"replay\" needs llm.fixture".into());
        }
        let mut paths = vec![("input", &self.input), ("output_dir", &self.output_dir)];
        if let Some(p) = &self.motion_manifest {
            paths.push(("motion_manifest", p));
        }
        if let Some(p) = &self.llm.fixture {
            paths.push(("llm.fixture", p));
        }
        for (i, (a, pa)) in paths.iter().enumerate() {
            for (b, pb) in &paths[i + 1..] {
                if pa == pb {
                    return bad(format!("{a} and {b} are the same path {}", pa.display()));
                }
            }
        }
        Ok(())
    }

    /// The chat client implied by the judge and reasoning settings.
    pub fn client(&self) -> Result<Option<Arc<LlmClient>>, PipelineError> {
        make_client(self.judge, self.reasoning.is_some(), &self.llm)
    }

    pub fn build_judge(&self, client: Option<Arc<LlmClient>>) -> Result<Box<dyn Judge>, PipelineError> {
        make_judge(self.judge, self.heuristic_threshold, client, &self.llm.params)
    }

    pub fn ingestor(&self) -> Ingestor {
        Ingestor::strict(self.categories.clone(), self.policy)
    }
}

/// A chat client when the judge or reasoning needs one: replay when a
/// fixture is configured (and the judge is not `llm`), HTTP otherwise.
pub fn make_client(judge: JudgeKind, reasoning: bool, llm: &LlmSettings) -> Result<Option<Arc<LlmClient>>, PipelineError> {
    if judge == JudgeKind::Heuristic && !reasoning {
        return Ok(None);
    }
    let client = match (judge, &llm.fixture) {
        (JudgeKind::Llm, _) | (JudgeKind::Heuristic, None) => LlmClient::from_config(&llm.client)?,
        (_, Some(fixture)) => LlmClient::replay(fixture)?,
        (JudgeKind::Replay, None) => return Err(PipelineError::Config("judge \"replay\" needs a fixture".into())),
    };
    Ok(Some(Arc::new(client)))
}

pub fn make_judge(
    kind: JudgeKind,
    heuristic_threshold: f64,
    client: Option<Arc<LlmClient>>,
    params: &ChatParams,
) -> Result<Box<dyn Judge>, PipelineError> {
    Ok(match kind {
        JudgeKind::Heuristic => Box::new(HeuristicJudge { threshold: heuristic_threshold }),
        JudgeKind::Llm | JudgeKind::Replay => {
            let client = client.ok_or_else(|| PipelineError::Config("LLM judge without a client".into()))?;
            Box::new(LlmJudge::new(client, params.clone()))
        }
    })
}

/// Record counts of one stage. `input == kept + dropped + errored + quarantined`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub input: u64,
    pub kept: u64,
    pub dropped: u64,
    pub errored: u64,
    pub quarantined: u64,
}

impl StageCounts {
    pub fn new(stage: &str) -> Self {
        StageCounts { stage: stage.to_string(), input: 0, kept: 0, dropped: 0, errored: 0, quarantined: 0 }
    }

    pub fn conserved(&self) -> bool {
        self.input == self.kept + self.dropped + self.errored + self.quarantined
    }
}

impl From<StreamCounts> for StageCounts {
    fn from(c: StreamCounts) -> Self {
        StageCounts { input: c.lines, kept: c.records, quarantined: c.quarantined, ..StageCounts::new("ingest") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageCounts>,
    pub stats: CorpusStats,
}

impl PipelineReport {
    pub fn conserved(&self) -> bool {
        self.stages.iter().all(StageCounts::conserved)
            && self.stages.windows(2).all(|w| w[0].kept == w[1].input)
    }

    pub fn stage(&self, name: &str) -> Option<&StageCounts> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: String,
    config: Value,
    judge_id: String,
    template: &'a str,
    template_hash: String,
    stages: &'a [StageCounts],
    outputs: [&'static str; 5],
}

/// Anonymous scratch file for one stage's share of a merged output.
struct Spool {
    writer: BufWriter<File>,
}

impl Spool {
    fn new() -> io::Result<Self> {
        Ok(Spool { writer: BufWriter::new(tempfile::tempfile()?) })
    }

    fn write_json_line<T: Serialize>(&mut self, value: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, value)?;
        self.writer.write_all(b"\n")
    }

    fn drain_into<W: Write>(self, out: &mut W) -> io::Result<()> {
        let mut file = self.writer.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        io::copy(&mut file, out)?;
        Ok(())
    }
}

/// Motion scores by video id from a JSONL manifest of `{"video_id", "motion_score"}`.
pub fn load_motion_manifest(path: &Path) -> Result<Vec<MotionRecord>, PipelineError> {
    let reader = BufReader::new(File::open(path).map_err(io_at(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MotionRecord = serde_json::from_str(&line).map_err(|e| PipelineError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Settings for turning a record into a training record.
#[derive(Clone)]
pub struct FimSettings {
    pub seed: u64,
    pub min_events: usize,
    pub template: PromptTemplate,
    /// Client and mode for reasoning; `None` skips it.
    pub reasoning: Option<(Arc<LlmClient>, ChatParams, LabelMode)>,
}

/// Why a record produced no training record.
#[derive(Debug, Clone, PartialEq)]
pub struct FimReject {
    pub stage: QuarantineStage,
    pub reason: String,
}

impl FimReject {
    fn into_entry(self, ordinal: u64, record: &CorpusRecord) -> QuarantineEntry {
        QuarantineEntry {
            line: ordinal,
            stage: self.stage,
            video_id: Some(record.video_id().to_string()),
            reason: self.reason,
            raw: serde_json::to_string(record).unwrap_or_default(),
        }
    }
}

/// Masks one seeded event of `record` and renders it.
pub fn masked_sample(record: &CorpusRecord, settings: &FimSettings) -> Result<MaskedSample, FimReject> {
    let reject = |e: crate::fim::FimError| FimReject { stage: QuarantineStage::Mask, reason: e.to_string() };
    let t = &record.timeline;
    let index = sample_mask(t, settings.seed, settings.min_events).map_err(reject)?;
    mask_event(t, index, settings.min_events).and_then(|s| s.rendered(&settings.template)).map_err(reject)
}

/// Masks, optionally reasons about, and renders one record.
pub fn training_record(record: &CorpusRecord, settings: &FimSettings) -> Result<TrainingRecord, FimReject> {
    let mut sample = masked_sample(record, settings)?;
    if let Some((client, params, mode)) = &settings.reasoning {
        sample = attach_reasoning(sample, client, params, *mode)
            .map_err(|e| FimReject { stage: QuarantineStage::Reasoning, reason: e.to_string() })?;
    }
    TrainingRecord::build(&sample, &settings.template)
        .map_err(|e| FimReject { stage: QuarantineStage::Mask, reason: e.to_string() })
}

/// Runs the whole pipeline described by `config`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    let out = config.output_dir.as_path();
    fs::create_dir_all(out).map_err(io_at(out))?;
    let template = PromptTemplate::by_name(&config.template).expect("validated");
    let client = config.client()?;
    let judge = config.build_judge(client.clone())?;
    let motion: Option<HashMap<String, f64>> = match &config.motion_manifest {
        Some(p) => Some(load_motion_manifest(p)?.into_iter().map(|r| (r.video_id, r.motion_score)).collect()),
        None => None,
    };
    let settings = FimSettings {
        seed: config.seed,
        min_events: config.min_events,
        template: template.clone(),
        reasoning: config.reasoning.map(|mode| (client.clone().expect("client built for reasoning"), config.llm.params.clone(), mode)),
    };

    let at = |name: &str| out.join(name);
    let create = |name: &str| AtomicFile::create(at(name)).map_err(io_at(out));
    let mut quarantine = create(QUARANTINE_FILE)?;
    let mut kept_file = create(KEPT_FILE)?;
    let mut train_file = create(TRAIN_FILE)?;
    let spool = || Spool::new().map_err(io_at(out));
    let motion_drops = RefCell::new(spool()?);
    let mut coherence_drops = spool()?;
    let mut late_quarantine = spool()?;

    let failure: RefCell<Option<PipelineError>> = RefCell::new(None);
    let fail = |e: PipelineError| {
        failure.borrow_mut().get_or_insert(e);
    };
    let mut motion_counts = StageCounts::new("motion");
    let mut coherence_counts = StageCounts::new("coherence");
    let mut mask_counts = StageCounts::new("mask");
    let mut reasoning_counts = StageCounts::new("reasoning");
    let mut stats = StatsAccumulator::default();

    let ingest_counts = {
        let mut stream = RecordStream::open(&config.input, config.ingestor(), config.workers, &mut quarantine)?;
        {
            let records = stream.by_ref().map_while(|r| r.map_err(|e| fail(e.into())).ok());
            let motion_counts = &mut motion_counts;
            let records = records.filter(|record| {
                let Some(scores) = &motion else { return true };
                motion_counts.input += 1;
                let score = scores.get(record.video_id()).copied();
                if score.is_some_and(|s| s >= config.motion_threshold) {
                    motion_counts.kept += 1;
                    return true;
                }
                if score.is_some() {
                    motion_counts.dropped += 1;
                } else {
                    motion_counts.errored += 1;
                }
                let entry = DropEntry::motion(record.video_id(), score, config.motion_threshold);
                if let Err(e) = motion_drops.borrow_mut().write_json_line(&entry) {
                    fail(PipelineError::Io { path: at(DROP_LOG_FILE), source: e });
                }
                false
            });
            let coherence_counts = &mut coherence_counts;
            let kept_file = &mut kept_file;
            let stats = &mut stats;
            let coherent = filter_corpus(records, judge.as_ref(), config.workers).filter_map(|judged| match judged {
                Judged::Kept(record) => {
                    coherence_counts.kept += 1;
                    stats.push(&record);
                    if let Err(e) = kept_file.write_json_line(&record) {
                        fail(PipelineError::Io { path: at(KEPT_FILE), source: e });
                    }
                    Some(record)
                }
                Judged::Dropped(entry) => {
                    if entry.is_error() {
                        coherence_counts.errored += 1;
                    } else {
                        coherence_counts.dropped += 1;
                    }
                    if let Err(e) = coherence_drops.write_json_line(&entry) {
                        fail(PipelineError::Io { path: at(DROP_LOG_FILE), source: e });
                    }
                    None
                }
            });
            let staged = parallel_map(coherent, config.workers, |record: CorpusRecord| {
                let result = training_record(&record, &settings);
                (record, result)
            });
            for (ordinal, item) in staged.enumerate() {
                let ordinal = ordinal as u64 + 1;
                mask_counts.input += 1;
                let written = match item {
                    Ok((_, Ok(train))) => {
                        mask_counts.kept += 1;
                        if settings.reasoning.is_some() {
                            reasoning_counts.input += 1;
                            reasoning_counts.kept += 1;
                        }
                        train_file.write_json_line(&train)
                    }
                    Ok((record, Err(reject))) => {
                        if reject.stage == QuarantineStage::Reasoning {
                            mask_counts.kept += 1;
                            reasoning_counts.input += 1;
                            reasoning_counts.quarantined += 1;
                        } else {
                            mask_counts.quarantined += 1;
                        }
                        late_quarantine.write_json_line(&reject.into_entry(ordinal, &record))
                    }
                    Err(worker) => {
                        mask_counts.quarantined += 1;
                        late_quarantine.write_json_line(&QuarantineEntry {
                            line: ordinal,
                            stage: QuarantineStage::Worker,
                            video_id: None,
                            reason: worker.message,
                            raw: String::new(),
                        })
                    }
                };
                if let Err(e) = written {
                    fail(PipelineError::Io { path: out.to_path_buf(), source: e });
                }
                if failure.borrow().is_some() {
                    break;
                }
            }
        }
        stream.counts()
    };
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }

    let mut ingest = StageCounts::from(ingest_counts);
    ingest.stage = "ingest".into();
    let mut stages = vec![ingest];
    if motion.is_some() {
        stages.push(motion_counts);
    }
    coherence_counts.input = coherence_counts.kept + coherence_counts.dropped + coherence_counts.errored;
    stages.push(coherence_counts);
    stages.push(mask_counts);
    if settings.reasoning.is_some() {
        stages.push(reasoning_counts);
    }

    let finish = || -> io::Result<()> {
        late_quarantine.drain_into(&mut quarantine)?;
        let mut drop_log = AtomicFile::create(at(DROP_LOG_FILE))?;
        motion_drops.into_inner().drain_into(&mut drop_log)?;
        coherence_drops.drain_into(&mut drop_log)?;
        quarantine.commit()?;
        drop_log.commit()?;
        kept_file.commit()?;
        train_file.commit()?;
        Ok(())
    };
    finish().map_err(io_at(out))?;

    let stats = stats.finish();
    write_json_pretty(at(STATS_FILE), &stats).map_err(io_at(out))?;
    let mut config_echo = serde_json::to_value(config).expect("config serializes");
    if let Some(map) = config_echo.as_object_mut() {
        map.remove("output_dir");
    }
    let manifest = Manifest {
        tool: format!("eventline {}", env!("CARGO_PKG_VERSION")),
        config: config_echo,
        judge_id: judge.id(),
        template: &template.name,
        template_hash: template.hash(),
        stages: &stages,
        outputs: [KEPT_FILE, TRAIN_FILE, QUARANTINE_FILE, DROP_LOG_FILE, STATS_FILE],
    };
    write_json_pretty(at(MANIFEST_FILE), &manifest).map_err(io_at(out))?;
    Ok(PipelineReport { stages, stats })
}

/// Checks a corpus, writing rejected lines to `quarantine` when given.
pub fn validate_corpus_file(
    input: &Path,
    ingestor: Ingestor,
    workers: usize,
    quarantine: Option<&Path>,
) -> Result<(StreamCounts, CorpusStats), PipelineError> {
    let mut entries: Vec<QuarantineEntry> = Vec::new();
    let mut file = quarantine.map(AtomicFile::create).transpose().map_err(io_at(quarantine.unwrap_or(input)))?;
    let mut acc = StatsAccumulator::default();
    let counts = match file.as_mut() {
        Some(f) => drain_stats(RecordStream::open(input, ingestor, workers, f)?, &mut acc)?,
        None => drain_stats(RecordStream::open(input, ingestor, workers, &mut entries)?, &mut acc)?,
    };
    if let Some(f) = file {
        f.commit().map_err(io_at(quarantine.unwrap_or(input)))?;
    }
    Ok((counts, acc.finish()))
}

fn drain_stats<S: crate::corpus::QuarantineSink>(
    mut stream: RecordStream<S>,
    acc: &mut StatsAccumulator,
) -> Result<StreamCounts, PipelineError> {
    for record in stream.by_ref() {
        acc.push(&record?);
    }
    Ok(stream.counts())
}

/// Shards a corpus by category into `out_dir/<slug>.jsonl`. Schema and
/// category rejects go to `quarantine` when given.
pub fn partition_file(
    input: &Path,
    categories: &CategorySet,
    out_dir: &Path,
    workers: usize,
    quarantine: Option<&Path>,
) -> Result<PartitionReport, PipelineError> {
    let mut entries: Vec<QuarantineEntry> = Vec::new();
    let failure = RefCell::new(None);
    let mut stream = RecordStream::open(input, Ingestor::schema_only(), workers, &mut entries)?;
    let records = stream.by_ref().map_while(|r| r.map_err(|e| *failure.borrow_mut() = Some(e)).ok());
    let mut late: Vec<QuarantineEntry> = Vec::new();
    let mut report = partition_by_category(records, categories, out_dir, &mut late)?;
    if let Some(e) = failure.into_inner() {
        return Err(e.into());
    }
    report.quarantined += stream.counts().quarantined;
    drop(stream);
    entries.extend(late);
    if let Some(q) = quarantine {
        let mut qf = AtomicFile::create(q).map_err(io_at(q))?;
        for entry in &entries {
            qf.write_json_line(entry).map_err(io_at(q))?;
        }
        qf.commit().map_err(io_at(q))?;
    }
    Ok(report)
}

/// Splits a motion manifest into kept ids and drop-log entries.
pub fn filter_motion_file(manifest: &Path, threshold: f64) -> Result<(MotionSplit, Vec<DropEntry>), PipelineError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PipelineError::Config(format!("threshold {threshold} is outside [0, 1]")));
    }
    let records = load_motion_manifest(manifest)?;
    let split = crate::coherence::motion_filter(&records, threshold);
    let dropped = records
        .iter()
        .filter(|r| r.motion_score < threshold)
        .map(|r| DropEntry::motion(&r.video_id, Some(r.motion_score), threshold))
        .collect();
    Ok((split, dropped))
}

/// Judges every record of a corpus, writing kept records and the drop log.
/// Lines that fail ingestion are counted as quarantined and skipped.
pub fn filter_coherence_file(
    input: &Path,
    judge: &dyn Judge,
    workers: usize,
    kept_out: &Path,
    drop_log_out: &Path,
) -> Result<StageCounts, PipelineError> {
    let mut counts = StageCounts::new("coherence");
    let mut kept = AtomicFile::create(kept_out).map_err(io_at(kept_out))?;
    let mut log = AtomicFile::create(drop_log_out).map_err(io_at(drop_log_out))?;
    let failure = RefCell::new(None);
    let mut stream = RecordStream::open(input, Ingestor::schema_only(), workers, crate::corpus::Discard)?;
    {
        let records = stream.by_ref().map_while(|r| r.map_err(|e| *failure.borrow_mut() = Some(e)).ok());
        for judged in filter_corpus(records, judge, workers) {
            counts.input += 1;
            let written = match judged {
                Judged::Kept(r) => {
                    counts.kept += 1;
                    kept.write_json_line(&r)
                }
                Judged::Dropped(e) => {
                    if e.is_error() {
                        counts.errored += 1;
                    } else {
                        counts.dropped += 1;
                    }
                    log.write_json_line(&e)
                }
            };
            written.map_err(io_at(drop_log_out))?;
        }
    }
    if let Some(e) = failure.into_inner() {
        return Err(e.into());
    }
    let ingest = stream.counts();
    counts.input += ingest.quarantined;
    counts.quarantined = ingest.quarantined;
    kept.commit().map_err(io_at(kept_out))?;
    log.commit().map_err(io_at(drop_log_out))?;
    Ok(counts)
}

/// Writes one line per record: the rendered [`MaskedSample`], or with
/// `training` set the [`TrainingRecord`]. Records that cannot be masked go
/// to `quarantine_out` when given.
pub fn fim_file(
    input: &Path,
    settings: &FimSettings,
    workers: usize,
    training: bool,
    out: &Path,
    quarantine_out: Option<&Path>,
) -> Result<StageCounts, PipelineError> {
    let mut counts = StageCounts::new(if training { "build-fim" } else { "mask" });
    let mut file = AtomicFile::create(out).map_err(io_at(out))?;
    let mut rejects: Vec<QuarantineEntry> = Vec::new();
    let failure = RefCell::new(None);
    let mut stream = RecordStream::open(input, Ingestor::schema_only(), workers, &mut rejects)?;
    let mut late: Vec<QuarantineEntry> = Vec::new();
    {
        let records = stream.by_ref().map_while(|r| r.map_err(|e| *failure.borrow_mut() = Some(e)).ok());
        let staged = parallel_map(records, workers, |record: CorpusRecord| {
            let line = if training {
                training_record(&record, settings).map(|t| serde_json::to_string(&t))
            } else {
                masked_sample(&record, settings).map(|s| serde_json::to_string(&s))
            };
            (record, line)
        });
        for (i, item) in staged.enumerate() {
            counts.input += 1;
            match item {
                Ok((_, Ok(line))) => {
                    counts.kept += 1;
                    let line = line.expect("records serialize");
                    file.write_all(line.as_bytes()).and_then(|_| file.write_all(b"\n")).map_err(io_at(out))?;
                }
                Ok((record, Err(reject))) => {
                    counts.quarantined += 1;
                    late.push(reject.into_entry(i as u64 + 1, &record));
                }
                Err(w) => {
                    counts.quarantined += 1;
                    late.push(QuarantineEntry {
                        line: i as u64 + 1,
                        stage: QuarantineStage::Worker,
                        video_id: None,
                        reason: w.message,
                        raw: String::new(),
                    });
                }
            }
        }
    }
    if let Some(e) = failure.into_inner() {
        return Err(e.into());
    }
    let ingest = stream.counts();
    counts.input += ingest.quarantined;
    counts.quarantined += ingest.quarantined;
    rejects.extend(late);
    if let Some(q) = quarantine_out {
        let mut qf = AtomicFile::create(q).map_err(io_at(q))?;
        for entry in &rejects {
            qf.write_json_line(entry).map_err(io_at(q))?;
        }
        qf.commit().map_err(io_at(q))?;
    }
    file.commit().map_err(io_at(out))?;
    Ok(counts)
}
