//! Prediction and ground-truth JSONL files for the evaluation commands.
//!
//! Predictions: `{"query_id": "q1", "windows": [{"start": 0, "end": 5, "score": 0.9}]}`.
//! Ground truth has the same shape without scores.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{GroundingSample, HighlightSample, ScoredWindow};
use crate::timeline::Interval;

#[derive(Debug, Error)]
pub enum EvalIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error("{path}: query {query_id:?} appears more than once")]
    DuplicateQuery { path: PathBuf, query_id: String },
    #[error("ground truth for query {0:?} has no windows")]
    EmptyGroundTruth(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub windows: Vec<WindowRow>,
}

/// Rows of a prediction or ground-truth file, in file order.
pub fn read_rows(path: &Path, require_scores: bool) -> Result<Vec<QueryRow>, EvalIoError> {
    let io = |source| EvalIoError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalIoError::Line { path: path.to_path_buf(), line: i + 1, message };
        let row: QueryRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        for w in &row.windows {
            Interval::new(w.start, w.end).map_err(|e| bad(e.to_string()))?;
            match w.score {
                Some(s) if !s.is_finite() => return Err(bad(format!("score {s} is not finite"))),
                None if require_scores => return Err(bad("window without score".into())),
                _ => {}
            }
        }
        if !seen.insert(row.query_id.clone()) {
            return Err(EvalIoError::DuplicateQuery { path: path.to_path_buf(), query_id: row.query_id });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Samples joined on query id, in ground-truth order.
#[derive(Debug, Clone, PartialEq)]
pub struct Joined<T> {
    pub samples: Vec<T>,
    /// Ground-truth queries with no prediction row.
    pub missing_predictions: usize,
    /// Prediction rows with no ground truth; ignored.
    pub unmatched_predictions: usize,
}

fn windows(row: &QueryRow) -> Vec<Interval> {
    row.windows.iter().map(|w| Interval::raw(w.start, w.end)).collect()
}

fn scored(row: &QueryRow) -> Vec<ScoredWindow> {
    row.windows
        .iter()
        .map(|w| ScoredWindow { interval: Interval::raw(w.start, w.end), score: w.score.unwrap_or(0.0) })
        .collect()
}

fn join<T>(
    preds: &[QueryRow],
    gts: &[QueryRow],
    mut make: impl FnMut(&QueryRow, Option<&QueryRow>) -> Result<T, EvalIoError>,
) -> Result<Joined<T>, EvalIoError> {
    let by_id: BTreeMap<&str, &QueryRow> = preds.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let mut samples = Vec::with_capacity(gts.len());
    let mut missing = 0;
    for gt in gts {
        if gt.windows.is_empty() {
            return Err(EvalIoError::EmptyGroundTruth(gt.query_id.clone()));
        }
        let pred = by_id.get(gt.query_id.as_str()).copied();
        if pred.is_none() {
            missing += 1;
        }
        samples.push(make(gt, pred)?);
    }
    let gt_ids: HashSet<&str> = gts.iter().map(|g| g.query_id.as_str()).collect();
    let unmatched = preds.iter().filter(|p| !gt_ids.contains(p.query_id.as_str())).count();
    Ok(Joined { samples, missing_predictions: missing, unmatched_predictions: unmatched })
}

/// Grounding uses the top-scored predicted window (earliest start on ties)
/// and the first ground-truth window. A query without predictions scores
/// IoU 0.
pub fn grounding_samples(preds: &[QueryRow], gts: &[QueryRow]) -> Result<Joined<GroundingSample>, EvalIoError> {
    join(preds, gts, |gt, pred| {
        let truth = windows(gt)[0];
        let top = pred.and_then(|p| HighlightSample::new(p.query_id.clone(), scored(p), Vec::new()).predictions.first().copied());
        let prediction = top.map(|w| w.interval).unwrap_or(Interval::raw(truth.start, truth.start));
        Ok(GroundingSample { query_id: gt.query_id.clone(), prediction, ground_truth: truth })
    })
}

pub fn highlight_samples(preds: &[QueryRow], gts: &[QueryRow]) -> Result<Joined<HighlightSample>, EvalIoError> {
    join(preds, gts, |gt, pred| {
        Ok(HighlightSample::new(gt.query_id.clone(), pred.map(scored).unwrap_or_default(), windows(gt)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{grounding_eval, highlight_eval, HitPolicy, DEFAULT_RECALL_THRESHOLDS};
    use std::io::Write;

    fn file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn exact_match_files() {
        let p = file(&[r#"{"query_id":"a","windows":[{"start":0,"end":5,"score":0.2},{"start":1,"end":4,"score":0.9}]}"#, ""]);
        let g = file(&[r#"{"query_id":"a","windows":[{"start":1,"end":4}]}"#]);
        let preds = read_rows(p.path(), true).unwrap();
        let gts = read_rows(g.path(), false).unwrap();
        let gs = grounding_samples(&preds, &gts).unwrap();
        assert_eq!(gs.samples[0].prediction, Interval::raw(1.0, 4.0));
        let s = grounding_eval(&gs.samples, &DEFAULT_RECALL_THRESHOLDS).unwrap();
        assert_eq!(s.miou, Some(1.0));
        let hs = highlight_samples(&preds, &gts).unwrap();
        assert_eq!(highlight_eval(&hs.samples, &HitPolicy::default()).unwrap().hit_at_1, Some(1.0));
    }

    #[test]
    fn missing_and_extra() {
        let p = file(&[r#"{"query_id":"zzz","windows":[{"start":0,"end":5,"score":1}]}"#]);
        let g = file(&[r#"{"query_id":"a","windows":[{"start":1,"end":4}]}"#]);
        let preds = read_rows(p.path(), true).unwrap();
        let gts = read_rows(g.path(), false).unwrap();
        let gs = grounding_samples(&preds, &gts).unwrap();
        assert_eq!((gs.missing_predictions, gs.unmatched_predictions), (1, 1));
        assert_eq!(grounding_eval(&gs.samples, &[0.5]).unwrap().miou, Some(0.0));
        assert!(highlight_samples(&preds, &gts).unwrap().samples[0].predictions.is_empty());
    }

    #[test]
    fn bad_rows() {
        let inverted = file(&[r#"{"query_id":"a","windows":[{"start":5,"end":1,"score":1}]}"#]);
        assert!(matches!(read_rows(inverted.path(), true), Err(EvalIoError::Line { line: 1, .. })));
        let unscored = file(&[r#"{"query_id":"a","windows":[{"start":0,"end":1}]}"#]);
        assert!(read_rows(unscored.path(), true).is_err());
        let dup = file(&[r#"{"query_id":"a","windows":[]}"#, r#"{"query_id":"a","windows":[]}"#]);
        assert!(matches!(read_rows(dup.path(), false), Err(EvalIoError::DuplicateQuery { .. })));
        let empty_gt = read_rows(file(&[r#"{"query_id":"a","windows":[]}"#]).path(), false).unwrap();
        assert!(matches!(grounding_samples(&[], &empty_gt), Err(EvalIoError::EmptyGroundTruth(_))));
    }
}
