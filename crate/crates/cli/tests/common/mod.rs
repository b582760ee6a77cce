#![allow(dead_code)]

use eventline::corpus::CorpusRecord;
use eventline::timeline::{Event, Timeline};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const WORDS: [&str; 16] = [
    "dough", "knead", "bowl", "bike", "wheel", "paint", "brush", "guitar", "string", "river", "boat", "camera", "lens",
    "hammer", "nail", "board",
];

/// A random exact tiling of `[0, duration)` into `n` events, bounds on a 10 ms grid.
pub fn random_timeline<R: Rng>(rng: &mut R, video_id: &str, n: usize) -> Timeline {
    let duration_cs: u64 = rng.random_range((n as u64 * 100)..=(n as u64 * 2_000));
    let mut cuts: Vec<u64> = Vec::new();
    while cuts.len() < n - 1 {
        let c = rng.random_range(1..duration_cs);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(duration_cs);
    let events = bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let words: Vec<&str> = (0..3).map(|_| *WORDS.choose(rng).unwrap()).collect();
            Event::new(i as u32, w[0] as f64 / 100.0, w[1] as f64 / 100.0, words.join(" "))
        })
        .collect();
    Timeline::new(video_id, duration_cs as f64 / 100.0, events)
}

/// `n` events of equal length whose captions all mention `topic`.
pub fn uniform_timeline(video_id: &str, n: usize, seconds_each: f64, topic: &str) -> Timeline {
    let events = (0..n)
        .map(|i| Event::new(i as u32, i as f64 * seconds_each, (i + 1) as f64 * seconds_each, format!("{topic} step {i}")))
        .collect();
    Timeline::new(video_id, n as f64 * seconds_each, events)
}

pub fn record_line(record: &CorpusRecord) -> String {
    serde_json::to_string(record).unwrap()
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_eventline"))
}

/// Runs the binary, returning (exit code, stdout, stderr).
pub fn run<I, S>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = bin().args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub const PIPELINE_SEED: u64 = 7;

/// Corpus, motion manifest, replay fixture and `config.json` for a replay
/// pipeline run. Every reject path is exercised at least once.
pub fn pipeline_fixture(dir: &std::path::Path) {
    use eventline::coherence::judge_request;
    use eventline::fim::{reasoning_request, PromptTemplate};
    use eventline::llm::{ChatParams, ReplayFixture};
    use eventline::pipeline::{masked_sample, FimSettings};
    use serde_json::json;

    let params = ChatParams::default();
    let settings = FimSettings { seed: PIPELINE_SEED, min_events: 3, template: PromptTemplate::canonical(), reasoning: None };
    let mut fixture = ReplayFixture::default();
    let mut lines = Vec::new();
    let mut motion = Vec::new();
    for i in 0..24 {
        let topic = format!("batter v{i}");
        let mut t = uniform_timeline(&format!("clip{i:02}"), 3 + i % 3, 8.0, &topic);
        let incoherent = i % 6 == 0;
        if incoherent {
            for (j, e) in t.events.iter_mut().enumerate() {
                e.caption = format!("w{i}z{j}");
            }
        }
        let record = CorpusRecord::new(t.clone(), if i % 2 == 0 { "cooking" } else { "vlog" });
        let verdict = if incoherent { "VERDICT: no\nRATIONALE: unrelated shots" } else { "VERDICT: yes\nRATIONALE: one task" };
        fixture.insert(&judge_request(&t, &params), verdict);
        if !incoherent && i != 11 {
            let sample = masked_sample(&record, &settings).unwrap();
            fixture.insert(&reasoning_request(&sample, &params), format!("Step 1: earlier steps of {i}\nEvent: next step"));
        }
        motion.push(json!({"video_id": t.video_id, "motion_score": if i == 5 { 0.0 } else { 0.4 }}));
        lines.push(record_line(&record));
    }
    let short = uniform_timeline("tiny", 2, 4.0, "batter");
    fixture.insert(&judge_request(&short, &params), "VERDICT: yes\nRATIONALE: fine");
    motion.push(json!({"video_id": "tiny", "motion_score": 0.4}));
    lines.push(record_line(&CorpusRecord::new(short, "cooking")));
    lines.push("{broken".into());
    lines.push(record_line(&CorpusRecord::new(uniform_timeline("odd", 3, 4.0, "batter"), "pottery")));

    std::fs::write(dir.join("corpus.jsonl"), lines.join("\n") + "\n").unwrap();
    let manifest: Vec<String> = motion.iter().map(|m| m.to_string()).collect();
    std::fs::write(dir.join("motion.jsonl"), manifest.join("\n") + "\n").unwrap();
    fixture.save(&dir.join("fixture.json")).unwrap();
    let config = json!({
        "input": "corpus.jsonl",
        "output_dir": "out",
        "motion_manifest": "motion.jsonl",
        "judge": "heuristic",
        "llm": {"fixture": "fixture.json"},
        "seed": 0,
        "workers": 2,
        "reasoning": "keep-original",
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

/// File name → bytes for every regular file under `dir`.
pub fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}
