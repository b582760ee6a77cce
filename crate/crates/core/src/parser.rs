//! Tolerant extraction of timestamped events from free-form model output.
//!
//! The grammar is line oriented. Each non-blank line is tried against a small
//! set of event forms; a line that matches none of them becomes a diagnostic
//! and parsing moves on. Accepted forms (after an optional list marker such as
//! `-`, `*` or `3.`):
//!
//! ```text
//! 161.00 - 183.00: filling and wrapping spring rolls
//! [01:30 - 02:00] mixing batter
//! 161s to 183s: filling and wrapping spring rolls
//! From 161.00 to 183.00, filling and wrapping spring rolls
//! Filling and wrapping spring rolls from 161.00 to 183.00 seconds.
//! Filling and wrapping spring rolls (161.00 - 183.00)
//! ```
//!
//! Time tokens are decimal seconds with an optional `s`/`sec`/`seconds` unit,
//! or clock form `mm:ss` / `hh:mm:ss`. A token containing `:` is always read as
//! a clock.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::{Event, Interval, Timeline, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedEvent {
    pub interval: Interval,
    pub caption: String,
    /// Byte range of the source line (trimmed) in the input.
    pub source_span: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    NoTimestamp,
    InvertedInterval,
    BadNumber,
    DuplicateLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub kind: DiagnosticKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub entries: Vec<Diagnostic>,
}

impl ParseDiagnostics {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: DiagnosticKind) -> usize {
        self.entries.iter().filter(|d| d.kind == kind).count()
    }

    fn push(&mut self, line: usize, kind: DiagnosticKind, message: impl Into<String>) {
        self.entries.push(Diagnostic { line, kind, message: message.into() });
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("not a time value: {0:?}")]
    BadNumber(String),
    #[error("no time window found")]
    NoWindowFound,
    #[error("only inverted windows found, first was {start} to {end}")]
    InvertedInterval { start: f64, end: f64 },
}

/// A time token captured under `name`.
fn time(name: &str) -> String {
    format!(r"(?P<{name}>\d{{1,2}}:\d{{1,2}}:\d{{1,2}}(?:\.\d+)?|\d+:\d{{1,2}}(?:\.\d+)?|\d+(?:\.\d+)?)(?:\s*(?:seconds|second|secs|sec|s)\b)?")
}
const DASH: &str = r"(?:-|–|—|~|to)";

static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:[-*•]\s+|\d{1,3}[.)]\s+)").unwrap());

static FORMS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    let (a, b) = (time("a"), time("b"));
    [
        // 161.00 - 183.00: caption   /   [161 - 183] caption
        format!(r"^(?i:(?:from|at)\s+)?[\[(]?\s*{a}\s*{DASH}\s*{b}\s*[\])]?\s*(?:[:：,]\s*|\s+)(?P<cap>\S.*)$"),
        // between 15 and 30 seconds, caption
        format!(r"^(?i:between)\s+{a}\s*(?i:and)\s*{b}\s*(?:[:：,]\s*|\s+)(?P<cap>\S.*)$"),
        // caption from 161 to 183 seconds.
        format!(r"^(?P<cap>.*?\S)\s*,?\s+(?i:from)\s+{a}\s*(?i:to)\s*{b}\s*\.?$"),
        // caption (161 - 183)
        format!(r"^(?P<cap>.*?\S)\s*[\[(]\s*{a}\s*{DASH}\s*{b}\s*[\])]\s*\.?$"),
    ]
    .iter()
    .map(|p| Regex::new(&format!("(?i:{p})")).unwrap())
    .collect()
});

static WINDOW: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?i){}\s*(?:-|–|—|~|to|and|until)\s*{}", time("a"), time("b"))).unwrap());

static HAS_DIGIT_TIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d").unwrap());

/// Converts one time token to seconds.
///
/// `mm:ss` becomes `60·mm + ss` and `hh:mm:ss` becomes `3600·hh + 60·mm + ss`;
/// a trailing unit (`s`, `sec`, `seconds`) is ignored.
pub fn normalize_time_token(token: &str) -> Result<Timestamp, ParseError> {
    let bad = || ParseError::BadNumber(token.to_string());
    let mut t = token.trim();
    for unit in ["seconds", "second", "secs", "sec", "s"] {
        if let Some(stripped) = t.strip_suffix(unit) {
            t = stripped.trim_end();
            break;
        }
    }
    if t.is_empty() {
        return Err(bad());
    }
    let parts: Vec<&str> = t.split(':').collect();
    let number = |s: &str| -> Result<f64, ParseError> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
            return Err(bad());
        }
        s.parse::<f64>().map_err(|_| bad())
    };
    let whole = |s: &str| -> Result<f64, ParseError> {
        if s.contains('.') {
            return Err(bad());
        }
        number(s)
    };
    let seconds = match parts.as_slice() {
        [s] => number(s)?,
        [m, s] => {
            let (m, s) = (whole(m)?, number(s)?);
            if s >= 60.0 {
                return Err(bad());
            }
            60.0 * m + s
        }
        [h, m, s] => {
            let (h, m, s) = (whole(h)?, whole(m)?, number(s)?);
            if m >= 60.0 || s >= 60.0 {
                return Err(bad());
            }
            3600.0 * h + 60.0 * m + s
        }
        _ => return Err(bad()),
    };
    Timestamp::new(seconds).map_err(|_| bad())
}

enum LineOutcome {
    Event(Interval, String),
    Problem(DiagnosticKind, String),
}

fn parse_line(line: &str) -> LineOutcome {
    let body = match LIST_MARKER.find(line) {
        Some(m) => &line[m.end()..],
        None => line,
    };
    let mut problem: Option<(DiagnosticKind, String)> = None;
    for form in FORMS.iter() {
        let Some(caps) = form.captures(body) else { continue };
        let start_tok = caps.name("a").unwrap().as_str();
        let end_tok = caps.name("b").unwrap().as_str();
        let caption = caps.name("cap").unwrap().as_str().trim();
        let (start, end) = match (normalize_time_token(start_tok), normalize_time_token(end_tok)) {
            (Ok(s), Ok(e)) => (s.seconds(), e.seconds()),
            (Err(e), _) | (_, Err(e)) => {
                problem.get_or_insert((DiagnosticKind::BadNumber, e.to_string()));
                continue;
            }
        };
        if start >= end {
            problem.get_or_insert((
                DiagnosticKind::InvertedInterval,
                format!("window {start_tok} to {end_tok} does not move forward"),
            ));
            continue;
        }
        if caption.is_empty() {
            continue;
        }
        return LineOutcome::Event(Interval::raw(start, end), caption.to_string());
    }
    let (kind, message) = problem.unwrap_or_else(|| {
        let message = if HAS_DIGIT_TIME.is_match(body) {
            "no timestamped event form matched"
        } else {
            "line has no timestamp"
        };
        (DiagnosticKind::NoTimestamp, message.to_string())
    });
    LineOutcome::Problem(kind, message)
}

/// Extracts every timestamped event line from `text`, in textual order.
///
/// Never fails; lines that are not events are reported in the diagnostics.
/// A line repeated verbatim is parsed once and flagged as a duplicate.
pub fn parse_events(text: &str) -> (Vec<ParsedEvent>, ParseDiagnostics) {
    let mut events = Vec::new();
    let mut diagnostics = ParseDiagnostics::default();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut offset = 0usize;
    for (n, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        let lead = raw.len() - raw.trim_start().len();
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let span = line_start + lead..line_start + lead + line.len();
        match parse_line(line) {
            LineOutcome::Event(interval, caption) => {
                if !seen.insert(line) {
                    diagnostics.push(n + 1, DiagnosticKind::DuplicateLine, "repeated line skipped");
                    continue;
                }
                events.push(ParsedEvent { interval, caption, source_span: span });
            }
            LineOutcome::Problem(kind, message) => diagnostics.push(n + 1, kind, message),
        }
    }
    (events, diagnostics)
}

/// Finds the first forward time window anywhere in `text`.
pub fn parse_single_window(text: &str) -> Result<Interval, ParseError> {
    let mut inverted: Option<(f64, f64)> = None;
    for caps in WINDOW.captures_iter(text) {
        let (Ok(start), Ok(end)) = (normalize_time_token(&caps["a"]), normalize_time_token(&caps["b"])) else {
            continue;
        };
        let (start, end) = (start.seconds(), end.seconds());
        if start < end {
            return Ok(Interval::raw(start, end));
        }
        inverted.get_or_insert((start, end));
    }
    match inverted {
        Some((start, end)) => Err(ParseError::InvertedInterval { start, end }),
        None => Err(ParseError::NoWindowFound),
    }
}

/// Renders one event in the canonical `161.00 - 183.00: caption` form.
pub fn format_event_line(interval: &Interval, caption: &str) -> String {
    format!("{interval}: {caption}")
}

/// Renders a timeline's events one per line in the canonical form.
pub fn render_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> String {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{}", format_event_line(&e.interval, &e.caption));
    }
    out
}

/// Builds a timeline from parsed events, numbering them in textual order.
///
/// Without an explicit duration the last event's end is used.
pub fn to_timeline(video_id: &str, duration: Option<f64>, events: &[ParsedEvent]) -> Timeline {
    let duration = duration.unwrap_or_else(|| events.iter().map(|e| e.interval.end).fold(0.0, f64::max));
    let events = events
        .iter()
        .enumerate()
        .map(|(i, e)| Event { index: i as u32, interval: e.interval, caption: e.caption.clone() })
        .collect();
    Timeline::new(video_id, duration, events)
}
