//! Dense event timelines and their boundary constraints.
//!
//! A [`Timeline`] is the ordered list of captioned events that tiles a video:
//! events are sorted, never overlap (touching boundaries are fine), stay inside
//! `[0, duration]`, and leave at most `coverage_tolerance` seconds uncovered.
//! [`validate`] reports every broken constraint; [`normalize`] repairs what can
//! be repaired deterministically.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default total uncovered time, in seconds, a timeline may leave.
pub const DEFAULT_COVERAGE_TOLERANCE: f64 = 0.5;

/// Non-negative, finite decimal seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Timestamp(f64);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimestampError {
    #[error("timestamp {0} is not finite")]
    NotFinite(f64),
    #[error("timestamp {0} is negative")]
    Negative(f64),
}

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0.0);

    pub fn new(seconds: f64) -> Result<Self, TimestampError> {
        if !seconds.is_finite() {
            Err(TimestampError::NotFinite(seconds))
        } else if seconds < 0.0 {
            Err(TimestampError::Negative(seconds))
        } else {
            // normalizes -0.0
            Ok(Timestamp(seconds + 0.0))
        }
    }

    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Timestamp {
    type Error = TimestampError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Timestamp::new(value)
    }
}

impl From<Timestamp> for f64 {
    fn from(t: Timestamp) -> f64 {
        t.0
    }
}

/// Renders with centisecond precision, e.g. `161.00`.
impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

/// A half-open time window `[start, end)` in seconds.
///
/// The fields are public so candidate (possibly broken) timelines can be
/// represented and reported on; [`Interval::new`] is the checked constructor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("interval bound is not a valid timestamp: {0}")]
    Bound(#[from] TimestampError),
    #[error("interval start {start} is not before end {end}")]
    NotIncreasing { start: f64, end: f64 },
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self, IntervalError> {
        let start = Timestamp::new(start)?.seconds();
        let end = Timestamp::new(end)?.seconds();
        if start >= end {
            return Err(IntervalError::NotIncreasing { start, end });
        }
        Ok(Interval { start, end })
    }

    /// Builds an interval without checking it.
    pub const fn raw(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start >= 0.0 && self.start < self.end
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} - {:.2}", self.start, self.end)
    }
}

/// One captioned segment of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "EventRepr", into = "EventRepr")]
pub struct Event {
    pub index: u32,
    pub interval: Interval,
    pub caption: String,
}

#[derive(Serialize, Deserialize)]
struct EventRepr {
    id: u32,
    start: f64,
    end: f64,
    caption: String,
}

impl From<EventRepr> for Event {
    fn from(r: EventRepr) -> Self {
        Event { index: r.id, interval: Interval::raw(r.start, r.end), caption: r.caption }
    }
}

impl From<Event> for EventRepr {
    fn from(e: Event) -> Self {
        EventRepr { id: e.index, start: e.interval.start, end: e.interval.end, caption: e.caption }
    }
}

impl Event {
    pub fn new(index: u32, start: f64, end: f64, caption: impl Into<String>) -> Self {
        Event { index, interval: Interval::raw(start, end), caption: caption.into() }
    }

    pub fn start(&self) -> f64 {
        self.interval.start
    }

    pub fn end(&self) -> f64 {
        self.interval.end
    }
}

/// A video's event list.
///
/// Deserialized timelines are candidates: nothing is checked until
/// [`validate`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub video_id: String,
    pub duration: f64,
    pub events: Vec<Event>,
}

impl Timeline {
    pub fn new(video_id: impl Into<String>, duration: f64, events: Vec<Event>) -> Self {
        Timeline { video_id: video_id.into(), duration, events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.caption.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationPolicy {
    /// Maximum total uncovered time in seconds (leading, internal and trailing gaps).
    pub coverage_tolerance: f64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy { coverage_tolerance: DEFAULT_COVERAGE_TOLERANCE }
    }
}

impl ValidationPolicy {
    pub fn exact() -> Self {
        ValidationPolicy { coverage_tolerance: 0.0 }
    }
}

/// Violation kinds, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    Overlap,
    Gap,
    OutOfBounds,
    Unsorted,
    EmptyCaption,
    ZeroLength,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Positions in the timeline's event list.
    pub indices: Vec<usize>,
    /// Size of the violation in seconds (zero for caption problems).
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn kinds(&self) -> Vec<ViolationKind> {
        let mut kinds: Vec<_> = self.violations.iter().map(|v| v.kind).collect();
        kinds.dedup();
        kinds
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}{:?} ({:.3}s)", v.kind, v.indices, v.magnitude)?;
        }
        Ok(())
    }
}

/// Checks a candidate timeline against every timeline constraint.
///
/// Never fails: malformed input shows up as violations, ordered by kind and
/// then by first event index.
pub fn validate(timeline: &Timeline, policy: &ValidationPolicy) -> ValidationReport {
    let mut violations = Vec::new();
    let events = &timeline.events;
    let duration = timeline.duration;
    let duration_ok = duration.is_finite() && duration >= 0.0;

    if !(duration_ok && duration > 0.0) {
        violations.push(Violation {
            kind: ViolationKind::OutOfBounds,
            indices: Vec::new(),
            magnitude: if duration.is_finite() { duration.abs() } else { f64::INFINITY },
        });
    }

    for (i, event) in events.iter().enumerate() {
        let Interval { start, end } = event.interval;
        if event.caption.trim().is_empty() {
            violations.push(Violation { kind: ViolationKind::EmptyCaption, indices: vec![i], magnitude: 0.0 });
        }
        if !(start.is_finite() && end.is_finite()) {
            violations.push(Violation {
                kind: ViolationKind::OutOfBounds,
                indices: vec![i],
                magnitude: f64::INFINITY,
            });
            continue;
        }
        if start >= end {
            violations.push(Violation { kind: ViolationKind::ZeroLength, indices: vec![i], magnitude: start - end });
        }
        let mut outside = 0.0;
        if start < 0.0 {
            outside += -start;
        }
        if duration_ok && end > duration {
            outside += end - duration;
        }
        if outside > 0.0 {
            violations.push(Violation { kind: ViolationKind::OutOfBounds, indices: vec![i], magnitude: outside });
        }
    }

    for i in 1..events.len() {
        let (prev, next) = (events[i - 1].start(), events[i].start());
        if next < prev {
            violations.push(Violation { kind: ViolationKind::Unsorted, indices: vec![i - 1, i], magnitude: prev - next });
        }
    }

    // Sweep in start order over the well-formed events only.
    let mut order: Vec<usize> = (0..events.len())
        .filter(|&i| {
            let iv = events[i].interval;
            iv.start.is_finite() && iv.end.is_finite() && iv.start < iv.end
        })
        .collect();
    order.sort_by(|&a, &b| events[a].start().total_cmp(&events[b].start()).then(a.cmp(&b)));

    let mut gaps: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut covered_to = 0.0_f64;
    let mut reach: Option<usize> = None;
    for &j in &order {
        let iv = events[j].interval;
        match reach {
            Some(r) => {
                let held = events[r].interval;
                if iv.start < held.end {
                    let overlap = held.intersection(&iv);
                    let (a, b) = if r < j { (r, j) } else { (j, r) };
                    violations.push(Violation { kind: ViolationKind::Overlap, indices: vec![a, b], magnitude: overlap });
                } else if iv.start > held.end {
                    let (a, b) = if r < j { (r, j) } else { (j, r) };
                    gaps.push((vec![a, b], iv.start - held.end));
                }
            }
            None => {
                if iv.start > 0.0 {
                    gaps.push((vec![j], iv.start));
                }
            }
        }
        if reach.is_none() || iv.end > covered_to {
            covered_to = iv.end;
            reach = Some(j);
        }
    }
    if duration_ok {
        match reach {
            Some(r) if covered_to < duration => gaps.push((vec![r], duration - covered_to)),
            None if duration > 0.0 => gaps.push((Vec::new(), duration)),
            _ => {}
        }
    }
    let total_gap: f64 = gaps.iter().map(|(_, g)| g).sum();
    if total_gap > policy.coverage_tolerance {
        violations.extend(
            gaps.into_iter()
                .map(|(indices, magnitude)| Violation { kind: ViolationKind::Gap, indices, magnitude }),
        );
    }

    violations.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then_with(|| a.indices.first().cmp(&b.indices.first()))
            .then_with(|| a.indices.cmp(&b.indices))
    });
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimelineError {
    #[error("no events to normalize")]
    NoEvents,
    #[error("duration must be positive and finite, got {0}")]
    ZeroDuration(f64),
    #[error("timeline cannot be repaired: {0}")]
    Unrepairable(String),
}

/// Repairs a candidate timeline into one that validates cleanly.
///
/// Events are sorted by start and clamped to `[0, duration]`. When two events
/// overlap, the earlier one is cut at the later one's start. Gaps are closed by
/// stretching the earlier event's end (the first event's start for a leading
/// gap) as long as the total uncovered time is within the policy tolerance.
/// The result is an exact tiling, so `normalize` is idempotent.
pub fn normalize(candidate: &Timeline, policy: &ValidationPolicy) -> Result<Timeline, TimelineError> {
    let duration = candidate.duration;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(TimelineError::ZeroDuration(duration));
    }
    if candidate.events.is_empty() {
        return Err(TimelineError::NoEvents);
    }
    let mut events = candidate.events.clone();
    for e in &events {
        if !(e.start().is_finite() && e.end().is_finite()) {
            return Err(TimelineError::Unrepairable(format!("event {} has a non-finite bound", e.index)));
        }
        if e.caption.trim().is_empty() {
            return Err(TimelineError::Unrepairable(format!("event {} has an empty caption", e.index)));
        }
    }
    events.sort_by(|a, b| a.start().total_cmp(&b.start()));
    for e in &mut events {
        e.interval.start = e.interval.start.clamp(0.0, duration);
        e.interval.end = e.interval.end.clamp(0.0, duration);
    }
    for i in 1..events.len() {
        let next_start = events[i].start();
        if events[i - 1].end() > next_start {
            events[i - 1].interval.end = next_start;
        }
    }
    if let Some(e) = events.iter().find(|e| e.start() >= e.end()) {
        return Err(TimelineError::Unrepairable(format!("event {} collapses to zero length", e.index)));
    }

    let leading = events[0].start();
    let trailing = duration - events[events.len() - 1].end();
    let internal: f64 = events.windows(2).map(|w| w[1].start() - w[0].end()).sum();
    let total_gap = leading + internal + trailing;
    if total_gap > policy.coverage_tolerance {
        return Err(TimelineError::Unrepairable(format!(
            "{total_gap:.3}s uncovered exceeds tolerance {:.3}s",
            policy.coverage_tolerance
        )));
    }
    events[0].interval.start = 0.0;
    for i in 1..events.len() {
        let next_start = events[i].start();
        events[i - 1].interval.end = next_start;
    }
    let last = events.len() - 1;
    events[last].interval.end = duration;

    Ok(Timeline { video_id: candidate.video_id.clone(), duration, events })
}

/// Fraction of the video covered by the union of its events.
pub fn coverage_ratio(timeline: &Timeline) -> Result<f64, TimelineError> {
    let duration = timeline.duration;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(TimelineError::ZeroDuration(duration));
    }
    let mut spans: Vec<(f64, f64)> = timeline
        .events
        .iter()
        .map(|e| (e.start().clamp(0.0, duration), e.end().clamp(0.0, duration)))
        .filter(|(s, e)| s < e)
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut covered = 0.0;
    let mut cursor = 0.0_f64;
    for (s, e) in spans {
        let from = s.max(cursor);
        if e > from {
            covered += e - from;
            cursor = e;
        }
    }
    Ok((covered / duration).clamp(0.0, 1.0))
}

/// Events per minute of video.
pub fn event_density(timeline: &Timeline) -> Result<f64, TimelineError> {
    let duration = timeline.duration;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(TimelineError::ZeroDuration(duration));
    }
    Ok(events_per_minute(timeline.events.len() as f64, duration))
}

/// `count` events spread over `seconds` of video, expressed per minute.
pub fn events_per_minute(count: f64, seconds: f64) -> f64 {
    count * 60.0 / seconds
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tl(duration: f64, spans: &[(f64, f64)]) -> Timeline {
        let events = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| Event::new(i as u32, s, e, format!("event {i}")))
            .collect();
        Timeline::new("v", duration, events)
    }

    fn spans(t: &Timeline) -> Vec<(f64, f64)> {
        t.events.iter().map(|e| (e.start(), e.end())).collect()
    }

    #[test]
    fn exact_tiling_is_clean() {
        let report = validate(&tl(20.0, &[(0.0, 10.0), (10.0, 20.0)]), &ValidationPolicy::default());
        assert!(report.is_clean(), "{report}");
    }

    #[test]
    fn overlap_reports_intersection() {
        let report = validate(&tl(20.0, &[(0.0, 10.0), (8.0, 20.0)]), &ValidationPolicy::default());
        assert_eq!(
            report.violations,
            vec![Violation { kind: ViolationKind::Overlap, indices: vec![0, 1], magnitude: 2.0 }]
        );
    }

    /// Uncovered length by brute force: walk sorted endpoints and sum every
    /// elementary segment no event covers.
    fn uncovered_by_sweep(t: &Timeline) -> f64 {
        let mut points: Vec<f64> = vec![0.0, t.duration];
        for e in &t.events {
            points.push(e.start());
            points.push(e.end());
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        points
            .windows(2)
            .filter(|w| {
                let mid = (w[0] + w[1]) / 2.0;
                !t.events.iter().any(|e| e.start() <= mid && mid < e.end())
            })
            .map(|w| w[1] - w[0])
            .sum()
    }

    #[test]
    fn gap_reports_uncovered_span() {
        let t = tl(20.0, &[(0.0, 10.0), (15.0, 20.0)]);
        let oracle = uncovered_by_sweep(&t);
        assert_eq!(oracle, 5.0);
        let report = validate(&t, &ValidationPolicy { coverage_tolerance: 0.5 });
        assert_eq!(
            report.violations,
            vec![Violation { kind: ViolationKind::Gap, indices: vec![0, 1], magnitude: oracle }]
        );
    }

    #[test]
    fn small_gaps_within_tolerance_pass() {
        let t = tl(20.0, &[(0.1, 10.0), (10.2, 19.9)]);
        assert!(validate(&t, &ValidationPolicy::default()).is_clean());
        let strict = validate(&t, &ValidationPolicy::exact());
        assert_eq!(strict.violations.len(), 3);
        assert!(strict.violations.iter().all(|v| v.kind == ViolationKind::Gap));
    }

    #[test]
    fn reports_other_kinds_in_order() {
        let mut t = tl(20.0, &[(5.0, 25.0), (0.0, 6.0), (7.0, 7.0)]);
        t.events[2].caption = "  ".into();
        let kinds: Vec<_> = validate(&t, &ValidationPolicy::default()).violations.iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::Overlap,
                ViolationKind::OutOfBounds,
                ViolationKind::Unsorted,
                ViolationKind::EmptyCaption,
                ViolationKind::ZeroLength
            ]
        );
    }

    #[test]
    fn nested_event_is_an_overlap() {
        let t = tl(30.0, &[(0.0, 30.0), (10.0, 20.0)]);
        let report = validate(&t, &ValidationPolicy::default());
        assert_eq!(report.kinds(), vec![ViolationKind::Overlap]);
        assert_eq!(report.violations[0].magnitude, 10.0);
    }

    #[test]
    fn empty_timeline_is_one_big_gap() {
        let report = validate(&tl(10.0, &[]), &ValidationPolicy::default());
        assert_eq!(report.violations, vec![Violation { kind: ViolationKind::Gap, indices: vec![], magnitude: 10.0 }]);
    }

    #[test]
    fn normalize_clamps_to_bounds() {
        let out = normalize(&tl(20.0, &[(-1.0, 10.0), (10.0, 20.0)]), &ValidationPolicy::default()).unwrap();
        assert_eq!(spans(&out), vec![(0.0, 10.0), (10.0, 20.0)]);
    }

    #[test]
    fn normalize_truncates_earlier_event() {
        let out = normalize(&tl(20.0, &[(0.0, 12.0), (10.0, 20.0)]), &ValidationPolicy::default()).unwrap();
        assert_eq!(spans(&out), vec![(0.0, 10.0), (10.0, 20.0)]);
    }

    #[test]
    fn normalize_closes_small_gaps() {
        let out = normalize(&tl(20.0, &[(0.0, 10.0), (10.3, 20.0)]), &ValidationPolicy::default()).unwrap();
        assert_eq!(spans(&out), vec![(0.0, 10.3), (10.3, 20.0)]);
    }

    #[test]
    fn normalize_rejects_large_gap_and_collapse() {
        let gap = normalize(&tl(20.0, &[(0.0, 10.0), (15.0, 20.0)]), &ValidationPolicy::default());
        assert!(matches!(gap, Err(TimelineError::Unrepairable(_))));
        let collapse = normalize(&tl(20.0, &[(0.0, 20.0), (0.0, 20.0)]), &ValidationPolicy::default());
        assert!(matches!(collapse, Err(TimelineError::Unrepairable(_))));
        let none = normalize(&tl(20.0, &[]), &ValidationPolicy::default());
        assert_eq!(none, Err(TimelineError::NoEvents));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_ratio(&tl(60.0, &[(0.0, 60.0)])).unwrap(), 1.0);
        assert_eq!(coverage_ratio(&tl(60.0, &[])).unwrap(), 0.0);
        assert!(matches!(coverage_ratio(&tl(0.0, &[])), Err(TimelineError::ZeroDuration(_))));
    }

    #[test]
    fn coverage_matches_discretized_union() {
        let t = tl(60.0, &[(0.0, 30.0), (40.0, 60.0), (10.0, 20.0)]);
        // 10 ms grid
        let cells = (t.duration * 100.0).round() as usize;
        let covered = (0..cells)
            .filter(|&k| {
                let mid = (k as f64 + 0.5) / 100.0;
                t.events.iter().any(|e| e.start() <= mid && mid < e.end())
            })
            .count();
        let oracle = covered as f64 / cells as f64;
        assert!((oracle - 50.0 / 60.0).abs() < 1e-12);
        assert!((coverage_ratio(&t).unwrap() - oracle).abs() < 1e-4);
        assert!((coverage_ratio(&t).unwrap() - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn density_examples() {
        let twelve = tl(120.0, &(0..12).map(|i| (i as f64 * 10.0, i as f64 * 10.0 + 10.0)).collect::<Vec<_>>());
        assert_eq!(event_density(&twelve).unwrap(), 6.0);
        assert_eq!(event_density(&tl(60.0, &[(0.0, 60.0)])).unwrap(), 1.0);
        assert_eq!(events_per_minute(10.5, 105.0), 6.0);
    }

    #[test]
    fn timeline_json_schema() {
        let json = r#"{"video_id":"abc","duration":20.0,"events":[{"id":0,"start":0.0,"end":10.0,"caption":"a"},{"id":1,"start":10.0,"end":20.0,"caption":"b"}]}"#;
        let t: Timeline = serde_json::from_str(json).unwrap();
        assert_eq!(t.events[1].interval, Interval::raw(10.0, 20.0));
        assert_eq!(serde_json::to_string(&t).unwrap(), json);
    }

    #[test]
    fn timestamp_rejects_bad_values() {
        assert!(Timestamp::new(-0.5).is_err());
        assert!(Timestamp::new(f64::NAN).is_err());
        assert_eq!(Timestamp::new(161.0).unwrap().to_string(), "161.00");
        assert!(Interval::new(3.0, 3.0).is_err());
    }
}
