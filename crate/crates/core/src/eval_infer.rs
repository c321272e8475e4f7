//! Ranking, greedy non-maximum suppression and the `R@n, IoU@m` metric.
//!
//! A query counts as a hit when some top-`n` segment overlaps its ground
//! truth with tIoU strictly greater than `m`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::DecodedSegment;
use crate::objective::{tiou_unchecked, Segment};

pub const RECALL_N: [usize; 2] = [1, 5];
pub const RECALL_IOU: [f64; 3] = [0.3, 0.5, 0.7];

/// A scored span after clamping to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// Every decoded segment of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub segments: Vec<DecodedSegment>,
}

impl PredictionSet {
    /// Clamps to `[0, 1]`, dropping segments that vanish or are not finite.
    pub fn clamped(&self) -> Vec<ScoredSegment> {
        self.segments
            .iter()
            .filter(|d| d.center.is_finite() && d.width.is_finite() && d.score.is_finite())
            .filter_map(|d| {
                Segment { start: d.start(), end: d.end() }
                    .clamp_unit()
                    .map(|segment| ScoredSegment { segment, score: d.score })
            })
            .collect()
    }
}

/// Score descending, then start ascending, then width ascending.
pub fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.segment.width().total_cmp(&b.segment.width()))
}

/// Greedy suppression: keep the best remaining segment, drop everything
/// overlapping it by more than `threshold`, repeat.
pub fn nms(segments: &[ScoredSegment], threshold: f64, max_keep: usize) -> Result<Vec<ScoredSegment>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("nms threshold {threshold} outside (0, 1]")));
    }
    let mut order = segments.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for cand in order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| tiou_unchecked(&k.segment, &cand.segment) <= threshold) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Fraction of queries with a top-`n` hit at tIoU `> m`.
pub fn recall_at(results: &[Vec<ScoredSegment>], gts: &[Segment], n: usize, m: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    if results.len() != gts.len() {
        return Err(Error::Input(format!("{} result lists for {} ground truths", results.len(), gts.len())));
    }
    let hits = results
        .iter()
        .zip(gts)
        .filter(|(ranked, gt)| ranked.iter().take(n).any(|s| tiou_unchecked(&s.segment, gt) > m))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub iou: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub entries: Vec<RecallEntry>,
}

impl EvalReport {
    pub fn evaluate(results: &[Vec<ScoredSegment>], gts: &[Segment]) -> Result<Self> {
        let mut entries = Vec::new();
        for n in RECALL_N {
            for iou in RECALL_IOU {
                entries.push(RecallEntry { n, iou, recall: recall_at(results, gts, n, iou)? });
            }
        }
        Ok(EvalReport { queries: results.len(), entries })
    }

    pub fn recall(&self, n: usize, iou: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.n == n && e.iou == iou).map(|e| e.recall)
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "queries: {} (hit: tIoU > m)", self.queries)?;
        for e in &self.entries {
            writeln!(f, "R@{},IoU@{:.1} = {:.4}", e.n, e.iou, e.recall)?;
        }
        Ok(())
    }
}
