//! Relevance filtering of captioned timelines and the static-video filter.

use std::borrow::Borrow;
use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{parallel_map, CorpusRecord};
use crate::llm::{ChatMessage, ChatParams, ChatRequest, LlmClient, LlmError};
use crate::timeline::Timeline;

pub const DEFAULT_HEURISTIC_THRESHOLD: f64 = 0.3;

const STOPWORDS_EN: &str = include_str!("data/stopwords_en.txt");

static STOPWORDS: LazyLock<HashSet<&'static str>> = LazyLock::new(|| {
    STOPWORDS_EN.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
});

const JUDGE_SYSTEM_PROMPT: &str = "You check dense video captions for temporal coherence. \
Given the ordered events of one video, decide whether consecutive events are causally or temporally related, \
i.e. whether they describe one continuous activity rather than unrelated clips. \
Reply with exactly two lines:\nVERDICT: yes|no\nRATIONALE: <one sentence>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error("timeline has {0} events, at least 2 required")]
    TooFewEvents(usize),
    #[error(transparent)]
    Upstream(#[from] LlmError),
    #[error("malformed judge response: {0}")]
    Malformed(String),
    #[error("judge panicked: {0}")]
    Panicked(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceVerdict {
    pub video_id: String,
    pub relevant: bool,
    pub rationale: String,
    pub judge_id: String,
}

pub trait Judge: Send + Sync {
    fn id(&self) -> String;
    fn judge(&self, timeline: &Timeline) -> Result<CoherenceVerdict, JudgeError>;
}

/// Runs `judge` on `timeline` after checking it has at least two events.
pub fn judge_coherence(timeline: &Timeline, judge: &dyn Judge) -> Result<CoherenceVerdict, JudgeError> {
    if timeline.events.len() < 2 {
        return Err(JudgeError::TooFewEvents(timeline.events.len()));
    }
    judge.judge(timeline)
}

fn content_tokens(caption: &str) -> HashSet<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

/// Number of adjacent caption pairs sharing a content token, and the pair count.
fn shared_pairs<S: AsRef<str>>(captions: &[S]) -> (usize, usize) {
    let tokens: Vec<_> = captions.iter().map(|c| content_tokens(c.as_ref())).collect();
    let shared = tokens.windows(2).filter(|w| !w[0].is_disjoint(&w[1])).count();
    (shared, tokens.len().saturating_sub(1))
}

/// Fraction of adjacent caption pairs that share at least one content token.
pub fn heuristic_score<S: AsRef<str>>(captions: &[S]) -> Result<f64, JudgeError> {
    if captions.len() < 2 {
        return Err(JudgeError::TooFewEvents(captions.len()));
    }
    let (shared, pairs) = shared_pairs(captions);
    Ok(shared as f64 / pairs as f64)
}

/// Offline judge: relevant when the adjacent-pair overlap score reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicJudge {
    pub threshold: f64,
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        HeuristicJudge { threshold: DEFAULT_HEURISTIC_THRESHOLD }
    }
}

impl Judge for HeuristicJudge {
    fn id(&self) -> String {
        format!("heuristic@{}", self.threshold)
    }

    fn judge(&self, timeline: &Timeline) -> Result<CoherenceVerdict, JudgeError> {
        let captions: Vec<&str> = timeline.captions().collect();
        if captions.len() < 2 {
            return Err(JudgeError::TooFewEvents(captions.len()));
        }
        let (shared, pairs) = shared_pairs(&captions);
        let score = shared as f64 / pairs as f64;
        Ok(CoherenceVerdict {
            video_id: timeline.video_id.clone(),
            relevant: score >= self.threshold,
            rationale: format!(
                "{shared} of {pairs} adjacent caption pairs share a content token (score {score:.4}, threshold {})",
                self.threshold
            ),
            judge_id: self.id(),
        })
    }
}

/// Judge backed by a chat model. Works with live or replay transports.
pub struct LlmJudge {
    client: Arc<LlmClient>,
    params: ChatParams,
}

static VERDICT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*verdict\s*:\s*\**\s*(?P<v>yes|no|relevant|irrelevant|true|false)\b").unwrap());
static RATIONALE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*rationale\s*:\s*(?P<r>\S.*?)\s*$").unwrap());

impl LlmJudge {
    pub fn new(client: Arc<LlmClient>, params: ChatParams) -> Self {
        LlmJudge { client, params }
    }

    pub fn request(&self, timeline: &Timeline) -> ChatRequest {
        judge_request(timeline, &self.params)
    }
}

/// The chat request an [`LlmJudge`] sends for `timeline`.
pub fn judge_request(timeline: &Timeline, params: &ChatParams) -> ChatRequest {
    let events = crate::parser::render_events(&timeline.events);
    let user = format!("Video {} ({:.2} s). Events:\n{}", timeline.video_id, timeline.duration, events);
    ChatRequest::new(params.clone(), vec![ChatMessage::system(JUDGE_SYSTEM_PROMPT), ChatMessage::user(user)])
}

/// Reads `VERDICT:` and `RATIONALE:` lines from a judge response.
pub fn parse_verdict(response: &str) -> Result<(bool, String), JudgeError> {
    let verdict = VERDICT_LINE
        .captures(response)
        .ok_or_else(|| JudgeError::Malformed(format!("no VERDICT line in {:?}", truncate(response, 80))))?;
    let relevant = matches!(verdict["v"].to_lowercase().as_str(), "yes" | "relevant" | "true");
    let rationale = RATIONALE_LINE.captures(response).map(|c| c["r"].to_string()).unwrap_or_default();
    if !relevant && rationale.is_empty() {
        return Err(JudgeError::Malformed("negative verdict without rationale".into()));
    }
    Ok((relevant, rationale))
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

impl Judge for LlmJudge {
    fn id(&self) -> String {
        format!("llm/{}", self.params.model_id)
    }

    fn judge(&self, timeline: &Timeline) -> Result<CoherenceVerdict, JudgeError> {
        if timeline.events.len() < 2 {
            return Err(JudgeError::TooFewEvents(timeline.events.len()));
        }
        let response = self.client.complete(&self.request(timeline))?;
        let (relevant, rationale) = parse_verdict(&response)?;
        Ok(CoherenceVerdict { video_id: timeline.video_id.clone(), relevant, rationale, judge_id: self.id() })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("motion score {0} is outside [0, 1]")]
pub struct MotionScoreError(pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MotionRepr")]
pub struct MotionRecord {
    pub video_id: String,
    pub motion_score: f64,
}

#[derive(Deserialize)]
struct MotionRepr {
    video_id: String,
    motion_score: f64,
}

impl TryFrom<MotionRepr> for MotionRecord {
    type Error = MotionScoreError;

    fn try_from(r: MotionRepr) -> Result<Self, Self::Error> {
        MotionRecord::new(r.video_id, r.motion_score)
    }
}

impl MotionRecord {
    pub fn new(video_id: impl Into<String>, motion_score: f64) -> Result<Self, MotionScoreError> {
        if !(0.0..=1.0).contains(&motion_score) {
            return Err(MotionScoreError(motion_score));
        }
        Ok(MotionRecord { video_id: video_id.into(), motion_score })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionSplit {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps ids whose score is at least `threshold`.
pub fn motion_filter<I>(records: I, threshold: f64) -> MotionSplit
where
    I: IntoIterator,
    I::Item: Borrow<MotionRecord>,
{
    let mut split = MotionSplit::default();
    for r in records {
        let r = r.borrow();
        if r.motion_score >= threshold {
            split.kept.push(r.video_id.clone());
        } else {
            split.dropped.push(r.video_id.clone());
        }
    }
    split
}

pub const MOTION_JUDGE_ID: &str = "motion-threshold";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropStage {
    Motion,
    Coherence,
}

/// One line of the drop log. `relevant` is null when the judge failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropEntry {
    pub video_id: String,
    pub stage: DropStage,
    pub relevant: Option<bool>,
    pub rationale: String,
    pub judge_id: String,
}

impl DropEntry {
    pub fn is_error(&self) -> bool {
        self.relevant.is_none()
    }

    pub fn motion(video_id: impl Into<String>, score: Option<f64>, threshold: f64) -> Self {
        let rationale = match score {
            Some(s) => format!("motion score {s:.6} below threshold {threshold}"),
            None => "no motion score in manifest".to_string(),
        };
        DropEntry {
            video_id: video_id.into(),
            stage: DropStage::Motion,
            relevant: if score.is_some() { Some(false) } else { None },
            rationale,
            judge_id: MOTION_JUDGE_ID.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Judged {
    Kept(CorpusRecord),
    Dropped(DropEntry),
}

/// Judges every record with at most `workers` judge calls in flight.
///
/// Output order equals input order. A judge error (or panic) becomes a drop
/// entry with `relevant: null` and the stream continues.
pub fn filter_corpus<'a, I>(records: I, judge: &'a dyn Judge, workers: usize) -> impl Iterator<Item = Judged> + 'a
where
    I: IntoIterator<Item = CorpusRecord>,
    I::IntoIter: 'a,
{
    let judge_id = judge.id();
    let ids = parallel_map(records, workers, move |record: CorpusRecord| {
        let verdict = catch_unwind(AssertUnwindSafe(|| judge_coherence(&record.timeline, judge))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            Err(JudgeError::Panicked(msg.unwrap_or_default()))
        });
        (record, verdict)
    });
    ids.map(move |r| match r {
        Ok((record, Ok(v))) if v.relevant => Judged::Kept(record),
        Ok((_, Ok(v))) => Judged::Dropped(DropEntry {
            video_id: v.video_id,
            stage: DropStage::Coherence,
            relevant: Some(false),
            rationale: v.rationale,
            judge_id: v.judge_id,
        }),
        Ok((record, Err(e))) => Judged::Dropped(DropEntry {
            video_id: record.video_id().to_string(),
            stage: DropStage::Coherence,
            relevant: None,
            rationale: format!("error: {e}"),
            judge_id: judge_id.clone(),
        }),
        Err(e) => Judged::Dropped(DropEntry {
            video_id: String::new(),
            stage: DropStage::Coherence,
            relevant: None,
            rationale: format!("error: {e}"),
            judge_id: judge_id.clone(),
        }),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<CorpusRecord>,
    pub drop_log: Vec<DropEntry>,
}

impl FilterOutcome {
    pub fn errored(&self) -> usize {
        self.drop_log.iter().filter(|e| e.is_error()).count()
    }

    pub fn dropped(&self) -> usize {
        self.drop_log.len() - self.errored()
    }
}

/// [`filter_corpus`] collected into kept records and a drop log.
pub fn filter_corpus_collect<I>(records: I, judge: &dyn Judge, workers: usize) -> FilterOutcome
where
    I: IntoIterator<Item = CorpusRecord>,
{
    let mut out = FilterOutcome::default();
    for j in filter_corpus(records, judge, workers) {
        match j {
            Judged::Kept(r) => out.kept.push(r),
            Judged::Dropped(e) => out.drop_log.push(e),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ReplayFixture, ReplayTransport, RetryPolicy};
    use crate::timeline::Event;

    fn tl(id: &str, captions: &[&str]) -> Timeline {
        let events =
            captions.iter().enumerate().map(|(i, c)| Event::new(i as u32, i as f64 * 5.0, (i + 1) as f64 * 5.0, *c)).collect();
        Timeline::new(id, captions.len() as f64 * 5.0, events)
    }

    fn record(id: &str, captions: &[&str]) -> CorpusRecord {
        CorpusRecord::new(tl(id, captions), "cooking")
    }

    #[test]
    fn egg_sequence_is_relevant() {
        let t = tl("v", &["crack eggs into bowl", "whisk the eggs", "pour eggs into pan"]);
        let v = judge_coherence(&t, &HeuristicJudge::default()).unwrap();
        assert!(v.relevant);
        assert_eq!(heuristic_score(&["crack eggs into bowl", "whisk the eggs", "pour eggs into pan"]).unwrap(), 1.0);
    }

    #[test]
    fn unrelated_captions_are_irrelevant() {
        let v = judge_coherence(&tl("v", &["a dog runs", "stock chart rises"]), &HeuristicJudge::default()).unwrap();
        assert!(!v.relevant);
        assert!(!v.rationale.is_empty());
        assert_eq!(v.judge_id, "heuristic@0.3");
    }

    #[test]
    fn heuristic_scores() {
        assert_eq!(heuristic_score(&["same words", "same words", "same words"]).unwrap(), 1.0);
        assert_eq!(heuristic_score(&["alpha beta", "gamma delta", "epsilon zeta"]).unwrap(), 0.0);
        assert_eq!(heuristic_score(&["crack eggs", "whisk eggs", "heat the pan"]).unwrap(), 0.5);
        assert_eq!(heuristic_score(&["only one"]), Err(JudgeError::TooFewEvents(1)));
        // stop words alone do not link captions
        assert_eq!(heuristic_score(&["the dog", "the cat"]).unwrap(), 0.0);
        assert_eq!(heuristic_score(&["The EGGS!", "eggs, again"]).unwrap(), 1.0);
    }

    #[test]
    fn single_event_is_too_few() {
        assert_eq!(judge_coherence(&tl("v", &["x"]), &HeuristicJudge::default()), Err(JudgeError::TooFewEvents(1)));
    }

    #[test]
    fn motion_filter_examples() {
        let recs: Vec<_> = [("a", 0.1), ("b", 0.4), ("c", 0.9)].iter().map(|(i, s)| MotionRecord::new(*i, *s).unwrap()).collect();
        let split = motion_filter(&recs, 0.4);
        assert_eq!(split.kept, vec!["b", "c"]);
        assert_eq!(split.dropped, vec!["a"]);
        assert_eq!(motion_filter(&recs, 0.0).kept.len(), 3);
        let zero = MotionRecord::new("z", 0.0).unwrap();
        assert_eq!(motion_filter([&zero], 1e-9).dropped, vec!["z"]);
        assert!(MotionRecord::new("bad", 1.5).is_err());
        assert!(serde_json::from_str::<MotionRecord>(r#"{"video_id":"x","motion_score":-0.1}"#).is_err());
    }

    struct Fixed(Option<bool>);

    impl Judge for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn judge(&self, t: &Timeline) -> Result<CoherenceVerdict, JudgeError> {
            if t.video_id == "boom" {
                return Err(JudgeError::Malformed("nope".into()));
            }
            match self.0 {
                Some(relevant) => Ok(CoherenceVerdict {
                    video_id: t.video_id.clone(),
                    relevant,
                    rationale: "fixed".into(),
                    judge_id: self.id(),
                }),
                None => panic!("judge crashed"),
            }
        }
    }

    fn three(mid: &str) -> Vec<CorpusRecord> {
        vec![record("a", &["x", "y"]), record(mid, &["x", "y"]), record("c", &["x", "y"])]
    }

    #[test]
    fn mock_judges() {
        let all = filter_corpus_collect(three("b"), &Fixed(Some(true)), 2);
        assert_eq!(all.kept, three("b"));
        assert!(all.drop_log.is_empty());

        let none = filter_corpus_collect(three("b"), &Fixed(Some(false)), 2);
        assert!(none.kept.is_empty());
        assert_eq!(none.dropped(), 3);

        let err = filter_corpus_collect(three("boom"), &Fixed(Some(true)), 2);
        assert_eq!(err.kept.len(), 2);
        assert_eq!(err.errored(), 1);
        assert_eq!(err.drop_log[0].video_id, "boom");
        assert_eq!(err.drop_log[0].relevant, None);

        let panicked = filter_corpus_collect(three("b"), &Fixed(None), 3);
        assert_eq!(panicked.errored(), 3);
        assert_eq!(panicked.drop_log[1].video_id, "b");
        assert_eq!(panicked.drop_log[1].rationale, "error: judge panicked: judge crashed");
    }

    #[test]
    fn drop_entry_json() {
        let e = DropEntry::motion("v", Some(0.01), 0.05);
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(
            json,
            r#"{"video_id":"v","stage":"motion","relevant":false,"rationale":"motion score 0.010000 below threshold 0.05","judge_id":"motion-threshold"}"#
        );
    }

    #[test]
    fn heuristic_independent_of_workers() {
        let recs: Vec<_> = (0..200)
            .map(|i| record(&format!("v{i}"), if i % 3 == 0 { &["a dog runs", "stock chart rises"] } else { &["eggs", "eggs"] }))
            .collect();
        let one = filter_corpus_collect(recs.clone(), &HeuristicJudge::default(), 1);
        let four = filter_corpus_collect(recs, &HeuristicJudge::default(), 4);
        assert_eq!(one, four);
        assert_eq!(one.kept.len() + one.drop_log.len(), 200);
    }

    #[test]
    fn llm_judge_via_replay() {
        let params = ChatParams::default();
        let yes = tl("y", &["crack eggs", "whisk eggs"]);
        let no = tl("n", &["a dog runs", "stock chart"]);
        let odd = tl("o", &["one", "two"]);
        let mut fixture = ReplayFixture::default();
        fixture.insert(&judge_request(&yes, &params), "VERDICT: yes\nRATIONALE: same dish");
        fixture.insert(&judge_request(&no, &params), "VERDICT: no\nRATIONALE: unrelated clips");
        fixture.insert(&judge_request(&odd, &params), "Looks fine to me.");
        let client = LlmClient::new(Arc::new(ReplayTransport::new(fixture)), RetryPolicy::default(), u32::MAX).unwrap();
        let judge = LlmJudge::new(Arc::new(client), params);
        assert!(judge.judge(&yes).unwrap().relevant);
        let v = judge.judge(&no).unwrap();
        assert!(!v.relevant);
        assert_eq!(v.rationale, "unrelated clips");
        assert_eq!(v.judge_id, "llm/gpt-4o");
        assert!(matches!(judge.judge(&odd), Err(JudgeError::Malformed(_))));
        assert!(matches!(judge.judge(&tl("miss", &["p", "q"])), Err(JudgeError::Upstream(LlmError::FixtureMiss(_)))));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("verdict: YES").unwrap(), (true, String::new()));
        assert!(parse_verdict("VERDICT: no").is_err());
        assert_eq!(parse_verdict("Verdict: **no**\nRationale: x").unwrap(), (false, "x".into()));
    }
}
