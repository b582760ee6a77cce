//! Temporal grounding and highlight detection metrics.
//!
//! Grounding scores a single predicted window per query (mIoU and recall at
//! IoU thresholds). Highlight detection scores a ranked window list per query
//! against a set of ground-truth windows (mAP over IoU 0.50:0.05:0.95 and
//! HIT@1).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sorted_sum;
use crate::timeline::Interval;

/// Recall thresholds reported for grounding by default.
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Identifies how mAP is computed, recorded alongside every summary.
pub const MAP_PROTOCOL: &str = "greedy-match/iou=0.50:0.05:0.95/ap=all-points-uninterpolated";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("query {0} has no ground-truth windows")]
    NoGroundTruth(String),
}

/// Temporal IoU of two windows. Symmetric and in `[0, 1]`.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.end.max(b.end) - a.start.min(b.start);
    // Intersection never exceeds union for valid windows; the clamp only
    // absorbs rounding.
    (inter / union).clamp(0.0, 1.0)
}

/// The ten mAP IoU thresholds, 0.50 to 0.95 in steps of 0.05.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub query_id: String,
    pub prediction: Interval,
    pub ground_truth: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub interval: Interval,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightSample {
    pub query_id: String,
    /// Ranked best first; see [`HighlightSample::new`].
    pub predictions: Vec<ScoredWindow>,
    pub ground_truth: Vec<Interval>,
}

/// Rank order: higher score first, then earlier start, then input order
/// (the sort is stable).
fn rank_order(a: &ScoredWindow, b: &ScoredWindow) -> Ordering {
    b.score.total_cmp(&a.score).then(a.interval.start.total_cmp(&b.interval.start))
}

impl HighlightSample {
    /// Builds a sample, ranking the predictions.
    pub fn new(query_id: impl Into<String>, mut predictions: Vec<ScoredWindow>, ground_truth: Vec<Interval>) -> Self {
        predictions.sort_by(rank_order);
        HighlightSample { query_id: query_id.into(), predictions, ground_truth }
    }

    /// Predictions in rank order, whether or not the sample was built ranked.
    pub fn ranked(&self) -> Vec<ScoredWindow> {
        let mut preds = self.predictions.clone();
        preds.sort_by(rank_order);
        preds
    }
}

/// How the highest-ranked window is judged a hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitPolicy {
    /// Minimum IoU between the top-1 window and some ground-truth window.
    /// At zero any overlapping top-1 window counts.
    pub iou_threshold: f64,
}

impl Default for HitPolicy {
    fn default() -> Self {
        HitPolicy { iou_threshold: 0.5 }
    }
}

impl HitPolicy {
    pub fn new(iou_threshold: f64) -> Self {
        HitPolicy { iou_threshold }
    }

    pub fn is_hit(&self, overlap: f64) -> bool {
        overlap > 0.0 && overlap >= self.iou_threshold
    }
}

/// Aggregate scores. Fields a given evaluation does not produce stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    /// Keyed by threshold rendered as text, e.g. `"0.5"`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub recall_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_protocol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_iou_threshold: Option<f64>,
}

impl EvalSummary {
    fn empty(n_samples: usize) -> Self {
        EvalSummary {
            n_samples,
            miou: None,
            recall_at: BTreeMap::new(),
            map: None,
            hit_at_1: None,
            map_protocol: None,
            hit_iou_threshold: None,
        }
    }

    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recall_at.get(&threshold_key(threshold)).copied()
    }
}

pub fn threshold_key(threshold: f64) -> String {
    format!("{threshold}")
}

fn mean(values: &mut [f64]) -> f64 {
    sorted_sum(values) / values.len() as f64
}

/// mIoU and R@1 at each threshold.
///
/// The per-sample IoUs are summed in sorted order so the result does not
/// depend on sample order.
pub fn grounding_eval(samples: &[GroundingSample], thresholds: &[f64]) -> Result<EvalSummary, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut ious: Vec<f64> = samples.iter().map(|s| iou(&s.prediction, &s.ground_truth)).collect();
    let n = ious.len() as f64;
    let mut summary = EvalSummary::empty(samples.len());
    for &t in thresholds {
        let hits = ious.iter().filter(|&&v| v >= t).count();
        summary.recall_at.insert(threshold_key(t), hits as f64 / n);
    }
    summary.miou = Some(mean(&mut ious));
    Ok(summary)
}

/// Uninterpolated average precision of one ranked sample at one IoU threshold.
///
/// Predictions are walked in rank order; each is matched to the unmatched
/// ground-truth window it overlaps most (lowest index on ties), provided the
/// IoU reaches the threshold. AP is the sum of precision at every matched rank
/// divided by the number of ground-truth windows. No predictions scores 0.
pub fn average_precision(sample: &HighlightSample, iou_threshold: f64) -> Result<f64, MetricsError> {
    if sample.ground_truth.is_empty() {
        return Err(MetricsError::NoGroundTruth(sample.query_id.clone()));
    }
    let ranked = sample.ranked();
    let mut matched = vec![false; sample.ground_truth.len()];
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank, pred) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in sample.ground_truth.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let overlap = iou(&pred.interval, gt);
            if overlap > 0.0 && overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(precision_sum / sample.ground_truth.len() as f64)
}

/// AP averaged over the ten mAP thresholds.
pub fn mean_ap_over_thresholds(sample: &HighlightSample) -> Result<f64, MetricsError> {
    let thresholds = map_thresholds();
    let mut aps = thresholds
        .iter()
        .map(|&t| average_precision(sample, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(&mut aps))
}

/// Whether the top-ranked window hits some ground-truth window.
pub fn top1_hit(sample: &HighlightSample, policy: &HitPolicy) -> bool {
    let Some(top) = sample.ranked().into_iter().next() else {
        return false;
    };
    sample.ground_truth.iter().any(|gt| policy.is_hit(iou(&top.interval, gt)))
}

/// mAP and HIT@1 over a set of highlight samples.
pub fn highlight_eval(samples: &[HighlightSample], policy: &HitPolicy) -> Result<EvalSummary, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_sample = samples.iter().map(mean_ap_over_thresholds).collect::<Result<Vec<_>, _>>()?;
    let hits = samples.iter().filter(|s| top1_hit(s, policy)).count();
    let mut summary = EvalSummary::empty(samples.len());
    summary.map = Some(mean(&mut per_sample));
    summary.hit_at_1 = Some(hits as f64 / samples.len() as f64);
    summary.map_protocol = Some(MAP_PROTOCOL.to_string());
    summary.hit_iou_threshold = Some(policy.iou_threshold);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::raw(s, e)
    }

    /// Overlap on a 1 ms grid.
    fn grid_iou(a: &Interval, b: &Interval) -> f64 {
        let to_ms = |x: f64| (x * 1000.0).round() as i64;
        let (a0, a1, b0, b1) = (to_ms(a.start), to_ms(a.end), to_ms(b.start), to_ms(b.end));
        let lo = a0.min(b0);
        let hi = a1.max(b1);
        let (mut inter, mut union) = (0u64, 0u64);
        for t in lo..hi {
            let in_a = a0 <= t && t < a1;
            let in_b = b0 <= t && t < b1;
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&iv(5.0, 10.0), &iv(5.0, 10.0)), 1.0);
        assert_eq!(iou(&iv(0.0, 5.0), &iv(6.0, 10.0)), 0.0);
        let oracle = grid_iou(&iv(0.0, 10.0), &iv(5.0, 15.0));
        assert!((oracle - 0.3333).abs() < 1e-4);
        assert!((iou(&iv(0.0, 10.0), &iv(5.0, 15.0)) - oracle).abs() < 1e-12);
    }

    fn gsample(id: &str, pred: (f64, f64), gt: (f64, f64)) -> GroundingSample {
        GroundingSample { query_id: id.into(), prediction: iv(pred.0, pred.1), ground_truth: iv(gt.0, gt.1) }
    }

    #[test]
    fn grounding_fixture() {
        // IoU of [0, x] against [0, 10] is x / 10.
        let samples = vec![
            gsample("a", (0.0, 6.0), (0.0, 10.0)),
            gsample("b", (0.0, 4.0), (0.0, 10.0)),
            gsample("c", (0.0, 8.0), (0.0, 10.0)),
        ];
        let s = grounding_eval(&samples, &DEFAULT_RECALL_THRESHOLDS).unwrap();
        assert!((s.miou.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(s.recall_at(0.3), Some(1.0));
        assert!((s.recall_at(0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall_at(0.7).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn grounding_edge_cases() {
        assert_eq!(grounding_eval(&[], &DEFAULT_RECALL_THRESHOLDS), Err(MetricsError::EmptyInput));
        let s = grounding_eval(&[gsample("a", (0.0, 1.0), (2.0, 3.0))], &DEFAULT_RECALL_THRESHOLDS).unwrap();
        assert_eq!(s.miou, Some(0.0));
        assert!(s.recall_at.values().all(|&r| r == 0.0));
    }

    fn hit_miss_hit() -> HighlightSample {
        HighlightSample::new(
            "q",
            vec![
                ScoredWindow { interval: iv(0.0, 10.0), score: 0.9 },
                ScoredWindow { interval: iv(40.0, 50.0), score: 0.8 },
                ScoredWindow { interval: iv(20.0, 30.0), score: 0.7 },
            ],
            vec![iv(0.0, 10.0), iv(20.0, 30.0)],
        )
    }

    #[test]
    fn ap_hit_miss_hit() {
        let ap = average_precision(&hit_miss_hit(), 0.5).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let s = highlight_eval(&[hit_miss_hit()], &HitPolicy::default()).unwrap();
        assert!((s.map.unwrap() - 0.8333333333333333).abs() < 1e-12);
        assert_eq!(s.hit_at_1, Some(1.0));
    }

    #[test]
    fn ap_edge_cases() {
        let mut s = hit_miss_hit();
        s.ground_truth.clear();
        assert!(matches!(average_precision(&s, 0.5), Err(MetricsError::NoGroundTruth(_))));

        let silent = HighlightSample::new("q", vec![], vec![iv(0.0, 1.0)]);
        assert_eq!(average_precision(&silent, 0.5), Ok(0.0));
        assert!(!top1_hit(&silent, &HitPolicy::default()));

        let far = HighlightSample::new("q", vec![ScoredWindow { interval: iv(5.0, 15.0), score: 1.0 }], vec![iv(0.0, 10.0)]);
        assert_eq!(average_precision(&far, 0.5), Ok(0.0));
        assert_eq!(highlight_eval(&[far], &HitPolicy::default()).unwrap().hit_at_1, Some(0.0));
    }

    #[test]
    fn hit_policy_thresholds() {
        let disjoint = HighlightSample::new("q", vec![ScoredWindow { interval: iv(20.0, 30.0), score: 1.0 }], vec![iv(0.0, 10.0)]);
        let touching = HighlightSample::new("q", vec![ScoredWindow { interval: iv(9.0, 30.0), score: 1.0 }], vec![iv(0.0, 10.0)]);
        let zero = HitPolicy::new(0.0);
        assert!(!top1_hit(&disjoint, &zero));
        assert!(top1_hit(&touching, &zero));
        assert!(!top1_hit(&touching, &HitPolicy::default()));
    }

    #[test]
    fn ties_rank_earlier_start_first() {
        let s = HighlightSample::new(
            "q",
            vec![
                ScoredWindow { interval: iv(20.0, 30.0), score: 0.5 },
                ScoredWindow { interval: iv(0.0, 10.0), score: 0.5 },
            ],
            vec![iv(0.0, 10.0)],
        );
        assert_eq!(s.predictions[0].interval, iv(0.0, 10.0));
        assert_eq!(average_precision(&s, 0.5), Ok(1.0));
    }

    #[test]
    fn summary_serializes_only_present_fields() {
        let s = grounding_eval(&[gsample("a", (0.0, 1.0), (0.0, 1.0))], &[0.5]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"n_samples":1,"miou":1.0,"recall_at":{"0.5":1.0}}"#);
    }
}
