//! Masked event prediction records.
//!
//! One event of a dense timeline is hidden: its time window stays visible to
//! the model, its caption becomes the target. The surrounding events are the
//! context. Optionally an LLM adds step-by-step reasoning (and a pseudo-event
//! caption) for the hidden segment.

use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::parallel_map;
use crate::llm::{ChatMessage, ChatParams, ChatRequest, LlmClient, LlmError};
use crate::parser::render_events;
use crate::timeline::{Event, Interval, Timeline};

pub const DEFAULT_MIN_EVENTS: usize = 3;

pub const PLACEHOLDERS: [&str; 4] = ["{events_before}", "{masked_window}", "{events_after}", "{instruction}"];

pub const DEFAULT_INSTRUCTION: &str = "The video below is described as a sequence of timestamped events. \
One event has been masked: its time window is known but its content is not. \
Reason step by step about what happens before and after, then describe the masked event.";

const DEFAULT_TEMPLATE_BODY: &str = "{instruction}

Events before the masked segment:
{events_before}
Masked segment: {masked_window}

Events after the masked segment:
{events_after}";

/// Rendered when a context side has no events.
const NO_EVENTS: &str = "(none)\n";

const REASONING_SYSTEM_PROMPT: &str = "You analyze dense video captions. \
Given the events surrounding a masked time window, infer what happens in the masked window. \
Answer with numbered reasoning lines of the form `Step 1: ...`, `Step 2: ...`, \
followed by one final line `Event: <one-sentence description of the masked event>`.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FimError {
    #[error("event index {index} out of range for {len} events")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("timeline has {len} events, at least {min} required")]
    TooFewEvents { len: usize, min: usize },
    #[error("template {name:?} is invalid: {reason}")]
    TemplateInvalid { name: String, reason: String },
    #[error(transparent)]
    Upstream(#[from] LlmError),
    #[error("malformed reasoning response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    /// The template shipped with the crate.
    pub fn canonical() -> Self {
        PromptTemplate { name: "masked-event/v1".into(), body: DEFAULT_TEMPLATE_BODY.into() }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        let canonical = Self::canonical();
        (name == canonical.name || name == "default").then_some(canonical)
    }

    /// Every placeholder must appear exactly once.
    pub fn validate(&self) -> Result<(), FimError> {
        for p in PLACEHOLDERS {
            let n = self.body.matches(p).count();
            if n != 1 {
                return Err(FimError::TemplateInvalid {
                    name: self.name.clone(),
                    reason: format!("placeholder {p} appears {n} times"),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over name and body, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0u8]);
        h.update(self.body.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub video_id: String,
    pub duration: f64,
    /// Position of the masked event in the source timeline.
    pub masked_index: usize,
    /// The masked event's own id.
    pub masked_id: u32,
    pub masked_window: Interval,
    pub context_before: Vec<Event>,
    pub context_after: Vec<Event>,
    pub target_caption: String,
    pub reasoning: Option<Vec<String>>,
    pub prompt_text: String,
    pub answer_text: String,
}

impl MaskedSample {
    pub fn context_len(&self) -> usize {
        self.context_before.len() + self.context_after.len()
    }

    /// The source timeline with the target caption put back.
    pub fn reconstruct(&self) -> Timeline {
        self.reconstruct_with(&self.target_caption)
    }

    pub fn reconstruct_with(&self, caption: &str) -> Timeline {
        let mut events = Vec::with_capacity(self.context_len() + 1);
        events.extend(self.context_before.iter().cloned());
        events.push(Event { index: self.masked_id, interval: self.masked_window, caption: caption.to_string() });
        events.extend(self.context_after.iter().cloned());
        Timeline::new(self.video_id.clone(), self.duration, events)
    }

    /// Fills `prompt_text` and `answer_text` from `template`.
    pub fn rendered(mut self, template: &PromptTemplate) -> Result<Self, FimError> {
        let r = render(&self, template)?;
        self.prompt_text = r.prompt;
        self.answer_text = r.answer;
        Ok(self)
    }
}

/// Hides event `index` of `timeline`.
pub fn mask_event(timeline: &Timeline, index: usize, min_events: usize) -> Result<MaskedSample, FimError> {
    let len = timeline.events.len();
    if len < min_events.max(1) {
        return Err(FimError::TooFewEvents { len, min: min_events });
    }
    if index >= len {
        return Err(FimError::IndexOutOfRange { index, len });
    }
    let masked = &timeline.events[index];
    Ok(MaskedSample {
        video_id: timeline.video_id.clone(),
        duration: timeline.duration,
        masked_index: index,
        masked_id: masked.index,
        masked_window: masked.interval,
        context_before: timeline.events[..index].to_vec(),
        context_after: timeline.events[index + 1..].to_vec(),
        target_caption: masked.caption.clone(),
        reasoning: None,
        prompt_text: String::new(),
        answer_text: String::new(),
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Picks the event to mask, uniformly, from `seed` and the video id.
pub fn sample_mask(timeline: &Timeline, seed: u64, min_events: usize) -> Result<usize, FimError> {
    let len = timeline.events.len();
    if len < min_events.max(1) {
        return Err(FimError::TooFewEvents { len, min: min_events });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(timeline.video_id.as_bytes()));
    Ok(rng.random_range(0..len))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendered {
    pub prompt: String,
    pub answer: String,
}

fn context_block(events: &[Event]) -> String {
    if events.is_empty() {
        NO_EVENTS.to_string()
    } else {
        render_events(events)
    }
}

/// Renders the prompt/answer pair.
///
/// The prompt lists context events as `start - end: caption` lines and shows
/// the masked window's timestamps, never its caption. The answer is the
/// reasoning steps (if any) followed by the target caption; without reasoning
/// it is the caption alone.
pub fn render(sample: &MaskedSample, template: &PromptTemplate) -> Result<Rendered, FimError> {
    template.validate()?;
    let prompt = template
        .body
        .replace("{instruction}", DEFAULT_INSTRUCTION)
        .replace("{masked_window}", &sample.masked_window.to_string())
        .replace("{events_before}", &context_block(&sample.context_before))
        .replace("{events_after}", &context_block(&sample.context_after));
    let answer = match sample.reasoning.as_deref() {
        Some(steps) if !steps.is_empty() => {
            let mut answer = String::from("Reasoning:\n");
            for (i, step) in steps.iter().enumerate() {
                answer.push_str(&format!("{}. {}\n", i + 1, step));
            }
            answer.push_str(&format!("Masked event ({}): {}", sample.masked_window, sample.target_caption));
            answer
        }
        _ => sample.target_caption.clone(),
    };
    Ok(Rendered { prompt, answer })
}

/// What the LLM's pseudo-event does to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Keep the original caption as the target.
    #[default]
    KeepOriginal,
    /// Replace the target with the LLM's pseudo-event.
    PseudoLabel,
}

/// The chat request asking for reasoning about a masked sample.
pub fn reasoning_request(sample: &MaskedSample, params: &ChatParams) -> ChatRequest {
    let user = format!(
        "Events before the masked segment:\n{}\nMasked segment: {}\n\nEvents after the masked segment:\n{}",
        context_block(&sample.context_before),
        sample.masked_window,
        context_block(&sample.context_after),
    );
    ChatRequest::new(params.clone(), vec![ChatMessage::system(REASONING_SYSTEM_PROMPT), ChatMessage::user(user)])
}

static STEP_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:step\s*\d+\s*[:.)\-]|\d+\s*[.)])\s*(?P<text>\S.*?)\s*$").unwrap());
static EVENT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:pseudo-event|masked event|event)\s*:\s*(?P<text>\S.*?)\s*$").unwrap());

/// Reasoning steps and optional pseudo-event from a model response.
pub fn parse_reasoning(response: &str) -> Result<(Vec<String>, Option<String>), FimError> {
    let mut steps = Vec::new();
    let mut event = None;
    for line in response.lines() {
        if let Some(c) = EVENT_LINE.captures(line) {
            event = Some(c["text"].to_string());
        } else if let Some(c) = STEP_LINE.captures(line) {
            steps.push(c["text"].to_string());
        }
    }
    if steps.is_empty() {
        return Err(FimError::MalformedResponse("no `Step N:` lines".into()));
    }
    Ok((steps, event))
}

/// Asks `client` for reasoning about the masked window and stores it on the sample.
pub fn attach_reasoning(
    mut sample: MaskedSample,
    client: &LlmClient,
    params: &ChatParams,
    mode: LabelMode,
) -> Result<MaskedSample, FimError> {
    let response = client.complete(&reasoning_request(&sample, params))?;
    let (steps, event) = parse_reasoning(&response)?;
    if mode == LabelMode::PseudoLabel {
        sample.target_caption =
            event.ok_or_else(|| FimError::MalformedResponse("no `Event:` line for pseudo-labeling".into()))?;
    }
    sample.reasoning = Some(steps);
    Ok(sample)
}

/// [`attach_reasoning`] over many samples with at most `workers` calls in
/// flight. Results keep input order.
pub fn attach_reasoning_all(
    samples: Vec<MaskedSample>,
    client: &LlmClient,
    params: &ChatParams,
    mode: LabelMode,
    workers: usize,
) -> Vec<Result<MaskedSample, FimError>> {
    parallel_map(samples, workers, |s| attach_reasoning(s, client, params, mode))
        .map(|r| r.unwrap_or_else(|e| Err(FimError::MalformedResponse(e.to_string()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub video_id: String,
    pub masked_index: usize,
    pub window: Interval,
    pub context: Vec<Event>,
    pub reasoning: Vec<String>,
    pub target: String,
    pub prompt: String,
    pub answer: String,
    pub template_hash: String,
}

impl TrainingRecord {
    pub fn build(sample: &MaskedSample, template: &PromptTemplate) -> Result<Self, FimError> {
        let Rendered { prompt, answer } = render(sample, template)?;
        let mut context = sample.context_before.clone();
        context.extend(sample.context_after.iter().cloned());
        Ok(TrainingRecord {
            video_id: sample.video_id.clone(),
            masked_index: sample.masked_index,
            window: sample.masked_window,
            context,
            reasoning: sample.reasoning.clone().unwrap_or_default(),
            target: sample.target_caption.clone(),
            prompt,
            answer,
            template_hash: template.hash(),
        })
    }
}
