mod common;

use std::fs;
use std::path::Path;

use eventline::coherence::judge_request;
use eventline::corpus::{CorpusRecord, QuarantineEntry, QuarantineStage};
use eventline::fim::{reasoning_request, PromptTemplate};
use eventline::llm::{ChatParams, ReplayFixture};
use eventline::pipeline::{
    masked_sample, run_pipeline, FimSettings, PipelineConfig, DROP_LOG_FILE, KEPT_FILE, MANIFEST_FILE,
    QUARANTINE_FILE, STATS_FILE, TRAIN_FILE,
};
use eventline::timeline::{Event, Timeline};
use serde_json::{json, Value};

use common::{record_line, uniform_timeline};

const SEED: u64 = 7;

struct Fixture {
    dir: tempfile::TempDir,
    records_in: usize,
}

/// 40 lines: mostly coherent cooking videos, plus every kind of reject.
fn build(dir: tempfile::TempDir, with_reasoning: bool) -> Fixture {
    let params = ChatParams::default();
    let mut lines = Vec::new();
    let mut fixture = ReplayFixture::default();
    let settings = FimSettings { seed: SEED, min_events: 3, template: PromptTemplate::canonical(), reasoning: None };
    let mut motion = Vec::new();
    for i in 0..32 {
        let topic = if i % 5 == 0 { format!("unrelated{i}") } else { format!("dough v{i}") };
        let mut t = uniform_timeline(&format!("vid{i:02}"), 3 + i % 4, 10.0, &topic);
        if i % 5 == 0 {
            for (j, e) in t.events.iter_mut().enumerate() {
                e.caption = format!("topic{i}x{j}");
            }
        }
        let record = CorpusRecord::new(t.clone(), if i % 2 == 0 { "cooking" } else { "DIY" });
        let verdict = if i % 5 == 0 { "VERDICT: no\nRATIONALE: captions are unrelated" } else { "VERDICT: yes\nRATIONALE: one recipe" };
        if i != 13 {
            fixture.insert(&judge_request(&t, &params), verdict);
        }
        if with_reasoning && i % 5 != 0 && i != 17 {
            let sample = masked_sample(&record, &settings).unwrap();
            fixture.insert(&reasoning_request(&sample, &params), format!("Step 1: context of {i}\nStep 2: so it continues\nEvent: dough step"));
        }
        motion.push(json!({"video_id": t.video_id, "motion_score": if i == 3 { 0.001 } else { 0.3 }}));
        lines.push(record_line(&record));
    }
    // two events: coherent but too short to mask
    let short = uniform_timeline("short", 2, 5.0, "dough");
    fixture.insert(&judge_request(&short, &params), "VERDICT: yes\nRATIONALE: fine");
    motion.push(json!({"video_id": "short", "motion_score": 0.5}));
    lines.push(record_line(&CorpusRecord::new(short, "cooking")));
    // no motion score
    lines.push(record_line(&CorpusRecord::new(uniform_timeline("nomotion", 3, 5.0, "dough"), "cooking")));
    lines.push("{not json".into());
    lines.push(record_line(&CorpusRecord::new(uniform_timeline("cat", 3, 5.0, "dough"), "astrology")));
    let overlap = Timeline::new("ovl", 20.0, vec![Event::new(0, 0.0, 12.0, "a"), Event::new(1, 10.0, 20.0, "b")]);
    lines.push(record_line(&CorpusRecord::new(overlap, "cooking")));
    lines.insert(5, String::new());

    let records_in = lines.iter().filter(|l| !l.is_empty()).count();
    fs::write(dir.path().join("corpus.jsonl"), lines.join("\n") + "\n").unwrap();
    fs::write(
        dir.path().join("motion.jsonl"),
        motion.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    fixture.save(&dir.path().join("fixture.json")).unwrap();
    let mut config = json!({
        "input": "corpus.jsonl",
        "output_dir": "out",
        "motion_manifest": "motion.jsonl",
        "judge": "replay",
        "llm": {"fixture": "fixture.json"},
        "seed": SEED,
        "workers": 2,
    });
    if with_reasoning {
        config["reasoning"] = json!("keep-original");
    }
    fs::write(dir.path().join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();
    Fixture { dir, records_in }
}

fn load(dir: &Path, overrides: &[&str]) -> PipelineConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    PipelineConfig::load(&dir.join("config.json"), &o).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn replay_run_is_byte_identical_and_conserves_records() {
    let fx = build(tempfile::tempdir().unwrap(), true);
    let dir = fx.dir.path();
    let a = run_pipeline(&load(dir, &["output_dir=out_a"])).unwrap();
    let b = run_pipeline(&load(dir, &["output_dir=out_b"])).unwrap();
    assert_eq!(a, b);
    let (ta, tb) = (tree(&dir.join("out_a")), tree(&dir.join("out_b")));
    assert_eq!(ta.len(), 6);
    assert_eq!(ta, tb);

    assert!(a.conserved(), "{:#?}", a.stages);
    let names: Vec<_> = a.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["ingest", "motion", "coherence", "mask", "reasoning"]);
    let ingest = a.stage("ingest").unwrap();
    assert_eq!(ingest.input as usize, fx.records_in);
    assert_eq!(ingest.quarantined, 3);
    let motion = a.stage("motion").unwrap();
    assert_eq!((motion.dropped, motion.errored), (1, 1));
    let coherence = a.stage("coherence").unwrap();
    // vid00, 05, 10, 15, 20, 25, 30 are incoherent; vid13 has no fixture entry
    assert_eq!((coherence.dropped, coherence.errored), (7, 1));
    let mask = a.stage("mask").unwrap();
    assert_eq!(mask.quarantined, 1);
    let reasoning = a.stage("reasoning").unwrap();
    assert_eq!(reasoning.quarantined, 1);

    let out = dir.join("out_a");
    let kept = jsonl(&out.join(KEPT_FILE));
    assert_eq!(kept.len() as u64, coherence.kept);
    let train = jsonl(&out.join(TRAIN_FILE));
    assert_eq!(train.len() as u64, reasoning.kept);
    assert!(train.iter().all(|t| t["reasoning"].as_array().unwrap().len() == 2));
    assert!(train.iter().all(|t| t["template_hash"] == PromptTemplate::canonical().hash()));

    let drops = jsonl(&out.join(DROP_LOG_FILE));
    assert_eq!(drops.len() as u64, motion.dropped + motion.errored + coherence.dropped + coherence.errored);
    assert_eq!(drops[0]["stage"], "motion");
    assert_eq!(drops.last().unwrap()["stage"], "coherence");
    assert!(drops.iter().any(|d| d["video_id"] == "vid13" && d["relevant"].is_null()));

    let quarantine: Vec<QuarantineEntry> = fs::read_to_string(out.join(QUARANTINE_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let stages: Vec<_> = quarantine.iter().map(|q| q.stage).collect();
    assert_eq!(
        stages,
        [QuarantineStage::Schema, QuarantineStage::Category, QuarantineStage::Validation, QuarantineStage::Reasoning, QuarantineStage::Mask]
    );
    assert_eq!(quarantine[0].line, 36);

    let stats: Value = serde_json::from_slice(&fs::read(out.join(STATS_FILE)).unwrap()).unwrap();
    assert_eq!(stats["video_count"].as_u64(), Some(coherence.kept));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert!(manifest["config"].get("output_dir").is_none());
    assert_eq!(manifest["judge_id"], "llm/gpt-4o");
}

#[test]
fn worker_count_does_not_change_outputs() {
    let fx = build(tempfile::tempdir().unwrap(), false);
    let dir = fx.dir.path();
    run_pipeline(&load(dir, &["output_dir=w1", "workers=1"])).unwrap();
    run_pipeline(&load(dir, &["output_dir=w4", "workers=4"])).unwrap();
    for name in [KEPT_FILE, TRAIN_FILE, QUARANTINE_FILE, DROP_LOG_FILE, STATS_FILE] {
        assert_eq!(fs::read(dir.join("w1").join(name)).unwrap(), fs::read(dir.join("w4").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn heuristic_run_without_motion() {
    let fx = build(tempfile::tempdir().unwrap(), false);
    let dir = fx.dir.path();
    let report = run_pipeline(&load(dir, &["output_dir=h", "judge=heuristic", "motion_manifest=null"])).unwrap();
    assert!(report.conserved());
    let names: Vec<_> = report.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["ingest", "coherence", "mask"]);
    // only the captions sharing no token with their neighbours are dropped
    assert_eq!(report.stage("coherence").unwrap().dropped, 7);
}

#[test]
fn failed_run_leaves_no_outputs() {
    let fx = build(tempfile::tempdir().unwrap(), false);
    let dir = fx.dir.path();
    let mut config = load(dir, &["output_dir=broken"]);
    config.input = dir.join("missing.jsonl");
    assert!(run_pipeline(&config).is_err());
    let leftovers: Vec<_> = fs::read_dir(dir.join("broken")).map(|d| d.count()).into_iter().collect();
    assert!(leftovers.iter().all(|&n| n == 0), "{leftovers:?}");
}
