use std::error::Error;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eventline::coherence::{DropEntry, DEFAULT_HEURISTIC_THRESHOLD};
use eventline::corpus::{CategorySet, Ingestor};
use eventline::fsio::{write_atomic, AtomicFile};
use eventline::evalio::{grounding_samples, highlight_samples, read_rows};
use eventline::fim::{LabelMode, PromptTemplate, DEFAULT_MIN_EVENTS};
use eventline::framegrid::{self, motion_score, plan_grid, RasterFrame};
use eventline::llm::{ChatParams, ClientConfig};
use eventline::metrics::{grounding_eval, highlight_eval, HitPolicy, DEFAULT_RECALL_THRESHOLDS};
use eventline::parser::{parse_events, parse_single_window, to_timeline};
use eventline::pipeline::{
    default_workers, filter_coherence_file, filter_motion_file, fim_file, make_client, make_judge, partition_file,
    run_pipeline, validate_corpus_file, FimSettings, JudgeKind, LlmSettings, PipelineConfig, DEFAULT_MOTION_THRESHOLD,
    MAX_DEFAULT_LLM_WORKERS,
};
use eventline::timeline::ValidationPolicy;
use serde_json::{json, Value};

type CliResult = Result<Outcome, Box<dyn Error>>;

/// Report plus whether the command counts as a success.
struct Outcome {
    report: Value,
    ok: bool,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Outcome { report, ok: true }
    }
}

#[derive(Parser)]
#[command(name = "eventline", version, about = "Dense event timelines: corpus curation, masked-event data and evaluation")]
struct Cli {
    /// Print reports as JSON instead of a key/value table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every record of a JSONL corpus; exits 1 if any line is rejected.
    ValidateCorpus(CorpusArgs),
    /// Corpus statistics over the records that pass validation.
    Stats(CorpusArgs),
    /// Shard a corpus by category.
    Partition(PartitionArgs),
    /// Threshold a motion-score manifest.
    FilterMotion(MotionArgs),
    /// Judge caption coherence per video.
    FilterCoherence(CoherenceArgs),
    /// Mask one event per video.
    Mask(MaskArgs),
    /// Build training records, optionally with reasoning chains.
    BuildFim(BuildFimArgs),
    /// Parse time-stamped events (or a single window) from text.
    Parse(ParseArgs),
    /// Tile PPM frames into a labelled grid.
    ComposeGrid(GridArgs),
    /// Grounding metrics: mIoU and recall at IoU thresholds.
    EvalGrounding(EvalArgs),
    /// Highlight metrics: mAP and HIT@1.
    EvalHighlight(HighlightArgs),
    /// Run the full curation pipeline from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct CorpusArgs {
    input: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Validation policy: `default`, `exact`, or a JSON file such as `{"coverage_tolerance": 0.5}`.
    #[arg(long, default_value = "default")]
    policy: String,
    /// Comma-separated category list; defaults to the built-in set.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    /// Write rejected lines here.
    #[arg(long)]
    quarantine: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    #[arg(long)]
    quarantine: Option<PathBuf>,
}

#[derive(Args)]
struct MotionArgs {
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MOTION_THRESHOLD)]
    threshold: f64,
    /// Write kept video ids here, one per line.
    #[arg(long)]
    kept: Option<PathBuf>,
    #[arg(long)]
    drop_log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Heuristic,
    Llm,
    Replay,
}

impl From<JudgeArg> for JudgeKind {
    fn from(j: JudgeArg) -> Self {
        match j {
            JudgeArg::Heuristic => JudgeKind::Heuristic,
            JudgeArg::Llm => JudgeKind::Llm,
            JudgeArg::Replay => JudgeKind::Replay,
        }
    }
}

#[derive(Args)]
struct LlmArgs {
    /// Replay fixture of recorded chat responses.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, default_value = "gpt-4o")]
    model: String,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API token.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long)]
    rpm: Option<u32>,
}

impl LlmArgs {
    fn settings(&self) -> LlmSettings {
        let mut client = ClientConfig::default();
        if let Some(e) = &self.endpoint {
            client.endpoint = e.clone();
        }
        if let Some(a) = &self.auth_env {
            client.auth_env = a.clone();
        }
        if let Some(r) = self.rpm {
            client.requests_per_minute = r;
        }
        let params = ChatParams { model_id: self.model.clone(), ..ChatParams::default() };
        LlmSettings { fixture: self.fixture.clone(), client, params }
    }
}

#[derive(Args)]
struct CoherenceArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    drop_log: PathBuf,
    #[arg(long, value_enum, default_value = "heuristic")]
    judge: JudgeArg,
    /// Minimum heuristic score to keep a video.
    #[arg(long, default_value_t = DEFAULT_HEURISTIC_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct FimArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MIN_EVENTS)]
    min_events: usize,
    #[arg(long, default_value = "masked-event/v1")]
    template: String,
    #[arg(long)]
    quarantine: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    fim: FimArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReasoningArg {
    KeepOriginal,
    PseudoLabel,
}

#[derive(Args)]
struct BuildFimArgs {
    #[command(flatten)]
    fim: FimArgs,
    /// Attach reasoning chains from a chat model.
    #[arg(long, value_enum)]
    reasoning: Option<ReasoningArg>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct ParseArgs {
    /// Text file; standard input when absent or `-`.
    input: Option<PathBuf>,
    /// Extract one query window instead of an event list.
    #[arg(long)]
    single: bool,
    /// Also emit a timeline with this video id.
    #[arg(long)]
    video_id: Option<String>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridLabel {
    Timestamp,
    Index,
}

#[derive(Args)]
struct GridArgs {
    /// Frames in temporal order.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    fps: f64,
    #[arg(long)]
    cols: u32,
    /// Clip length in seconds; defaults to frame count / fps.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_enum, default_value = "timestamp")]
    label_mode: GridLabel,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RECALL_THRESHOLDS)]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct HighlightArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Minimum IoU for the top prediction to count as a hit.
    #[arg(long, default_value_t = HitPolicy::default().iou_threshold)]
    hit_iou: f64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config override `key.path=value`; relative paths resolve against the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum)]
    judge: Option<JudgeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn workers(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(default_workers).max(1)
}

fn llm_workers(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| default_workers().min(MAX_DEFAULT_LLM_WORKERS)).max(1)
}

fn categories(list: &Option<Vec<String>>) -> CategorySet {
    list.as_ref().map(|c| CategorySet::new(c.iter().map(|s| s.trim().to_string()))).unwrap_or_default()
}

fn policy(arg: &str) -> Result<ValidationPolicy, Box<dyn Error>> {
    Ok(match arg {
        "default" => ValidationPolicy::default(),
        "exact" => ValidationPolicy::exact(),
        path => {
            let path = Path::new(path);
            serde_json::from_str(&fs::read_to_string(path).map_err(at(path))?).map_err(|e| format!("{}: {e}", path.display()))?
        }
    })
}

fn validate_cmd(a: &CorpusArgs, stats_only: bool) -> CliResult {
    let ingestor = Ingestor::strict(categories(&a.categories), policy(&a.policy)?);
    let (counts, stats) = validate_corpus_file(&a.input, ingestor, workers(a.workers), a.quarantine.as_deref())?;
    if stats_only {
        return Ok(Outcome::ok(serde_json::to_value(stats)?));
    }
    Ok(Outcome { report: json!({"counts": counts, "stats": stats}), ok: counts.quarantined == 0 })
}

fn partition_cmd(a: &PartitionArgs) -> CliResult {
    let report = partition_file(&a.input, &categories(&a.categories), &a.out_dir, workers(a.workers), a.quarantine.as_deref())?;
    Ok(Outcome::ok(serde_json::to_value(report)?))
}

fn at(path: &Path) -> impl FnOnce(io::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn write_lines(path: &Path, items: &[DropEntry]) -> Result<(), Box<dyn Error>> {
    let mut file = AtomicFile::create(path).map_err(at(path))?;
    for item in items {
        file.write_json_line(item).map_err(at(path))?;
    }
    file.commit().map_err(at(path))?;
    Ok(())
}

fn motion_cmd(a: &MotionArgs) -> CliResult {
    let (split, dropped) = filter_motion_file(&a.manifest, a.threshold)?;
    if let Some(path) = &a.kept {
        let text: String = split.kept.iter().map(|id| format!("{id}\n")).collect();
        write_atomic(path, text.as_bytes()).map_err(at(path))?;
    }
    if let Some(path) = &a.drop_log {
        write_lines(path, &dropped)?;
    }
    Ok(Outcome::ok(json!({
        "threshold": a.threshold,
        "kept": split.kept.len(),
        "dropped": split.dropped.len(),
    })))
}

fn coherence_cmd(a: &CoherenceArgs) -> CliResult {
    let kind = JudgeKind::from(a.judge);
    let settings = a.llm.settings();
    let client = make_client(kind, false, &settings)?;
    let judge = make_judge(kind, a.threshold, client, &settings.params)?;
    let w = if kind == JudgeKind::Heuristic { workers(a.workers) } else { llm_workers(a.workers) };
    let counts = filter_coherence_file(&a.input, judge.as_ref(), w, &a.out, &a.drop_log)?;
    Ok(Outcome { ok: counts.conserved(), report: json!({"judge_id": judge.id(), "counts": counts}) })
}

fn fim_settings(a: &FimArgs) -> Result<FimSettings, Box<dyn Error>> {
    let template = PromptTemplate::by_name(&a.template).ok_or_else(|| format!("unknown template {:?}", a.template))?;
    Ok(FimSettings { seed: a.seed, min_events: a.min_events, template, reasoning: None })
}

fn fim_report(a: &FimArgs, settings: &FimSettings, w: usize, training: bool) -> CliResult {
    let counts = fim_file(&a.input, settings, w, training, &a.out, a.quarantine.as_deref())?;
    Ok(Outcome {
        ok: counts.conserved(),
        report: json!({
            "template": settings.template.name,
            "template_hash": settings.template.hash(),
            "seed": settings.seed,
            "counts": counts,
        }),
    })
}

fn mask_cmd(a: &MaskArgs) -> CliResult {
    let settings = fim_settings(&a.fim)?;
    fim_report(&a.fim, &settings, workers(a.fim.workers), false)
}

fn build_fim_cmd(a: &BuildFimArgs) -> CliResult {
    let mut settings = fim_settings(&a.fim)?;
    let mut w = workers(a.fim.workers);
    if let Some(mode) = a.reasoning {
        let llm = a.llm.settings();
        let kind = if llm.fixture.is_some() { JudgeKind::Replay } else { JudgeKind::Llm };
        let client: Arc<_> = make_client(kind, true, &llm)?.ok_or("reasoning needs a chat client")?;
        let mode = match mode {
            ReasoningArg::KeepOriginal => LabelMode::KeepOriginal,
            ReasoningArg::PseudoLabel => LabelMode::PseudoLabel,
        };
        settings.reasoning = Some((client, llm.params.clone(), mode));
        w = llm_workers(a.fim.workers);
    }
    fim_report(&a.fim, &settings, w, true)
}

fn read_text(path: &Path) -> Result<String, Box<dyn Error>> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    Ok(fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn parse_cmd(a: &ParseArgs) -> CliResult {
    let text = read_text(a.input.as_deref().unwrap_or(Path::new("-")))?;
    if a.single {
        let window = parse_single_window(&text)?;
        return Ok(Outcome::ok(json!({"start": window.start, "end": window.end})));
    }
    let (events, diagnostics) = parse_events(&text);
    for d in &diagnostics.entries {
        eprintln!("line {}: {:?}: {}", d.line, d.kind, d.message);
    }
    let report = match &a.video_id {
        Some(id) => serde_json::to_value(to_timeline(id, a.duration, &events))?,
        None => json!({"events": events}),
    };
    Ok(Outcome { ok: !events.is_empty(), report })
}

fn grid_cmd(a: &GridArgs) -> CliResult {
    let frames = a.frames.iter().map(|p| RasterFrame::load_ppm(p)).collect::<Result<Vec<_>, _>>()?;
    let size = (frames[0].width(), frames[0].height());
    let duration = a.duration.unwrap_or(frames.len() as f64 / a.fps);
    let mode = match a.label_mode {
        GridLabel::Timestamp => framegrid::LabelMode::Timestamp,
        GridLabel::Index => framegrid::LabelMode::Index,
    };
    let plan = plan_grid(duration, a.fps, a.cols, size, mode)?;
    let grid = framegrid::compose_grid(&frames, &plan)?;
    grid.save_ppm(&a.out)?;
    let motion = if frames.len() >= 2 { Some(motion_score(&frames)?) } else { None };
    Ok(Outcome::ok(json!({
        "frames": plan.frame_count(),
        "cols": plan.cols,
        "rows": plan.rows,
        "width": grid.width(),
        "height": grid.height(),
        "motion_score": motion,
        "out": a.out,
    })))
}

fn warn_join(missing: usize, unmatched: usize) {
    if missing > 0 {
        eprintln!("warning: {missing} ground-truth queries have no prediction");
    }
    if unmatched > 0 {
        eprintln!("warning: {unmatched} predictions have no ground truth and were ignored");
    }
}

fn grounding_cmd(a: &EvalArgs) -> CliResult {
    let joined = grounding_samples(&read_rows(&a.pred, false)?, &read_rows(&a.gt, false)?)?;
    warn_join(joined.missing_predictions, joined.unmatched_predictions);
    Ok(Outcome::ok(serde_json::to_value(grounding_eval(&joined.samples, &a.thresholds)?)?))
}

fn highlight_cmd(a: &HighlightArgs) -> CliResult {
    let joined = highlight_samples(&read_rows(&a.pred, true)?, &read_rows(&a.gt, false)?)?;
    warn_join(joined.missing_predictions, joined.unmatched_predictions);
    Ok(Outcome::ok(serde_json::to_value(highlight_eval(&joined.samples, &HitPolicy::new(a.hit_iou))?)?))
}

fn pipeline_cmd(a: &PipelineArgs) -> CliResult {
    let mut overrides = a.overrides.clone();
    if let Some(j) = a.judge {
        overrides.push(format!("judge={}", serde_json::to_value(JudgeKind::from(j))?));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = a.workers {
        overrides.push(format!("workers={w}"));
    }
    if let Some(dir) = &a.output_dir {
        overrides.push(format!("output_dir={}", json!(std::path::absolute(dir)?)));
    }
    let config = PipelineConfig::load(&a.config, &overrides)?;
    let report = run_pipeline(&config)?;
    Ok(Outcome {
        ok: report.conserved(),
        report: json!({"output_dir": config.output_dir, "conserved": report.conserved(), "stages": report.stages, "stats": report.stats}),
    })
}

fn print_human(prefix: &str, v: &Value) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                print_human(&key, x);
            }
        }
        Value::Array(items) if items.iter().all(|x| !x.is_object() && !x.is_array()) => {
            let joined: Vec<String> = items.iter().map(scalar).collect();
            println!("{prefix:<32} {}", joined.join(", "));
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                print_human(&format!("{prefix}[{i}]"), x);
            }
        }
        x => println!("{prefix:<32} {}", scalar(x)),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        x => x.to_string(),
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::ValidateCorpus(a) => validate_cmd(a, false),
        Command::Stats(a) => validate_cmd(a, true),
        Command::Partition(a) => partition_cmd(a),
        Command::FilterMotion(a) => motion_cmd(a),
        Command::FilterCoherence(a) => coherence_cmd(a),
        Command::Mask(a) => mask_cmd(a),
        Command::BuildFim(a) => build_fim_cmd(a),
        Command::Parse(a) => parse_cmd(a),
        Command::ComposeGrid(a) => grid_cmd(a),
        Command::EvalGrounding(a) => grounding_cmd(a),
        Command::EvalHighlight(a) => highlight_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&outcome.report).expect("reports serialize"));
            } else {
                print_human("", &outcome.report);
            }
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
